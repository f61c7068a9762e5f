"""Threaded HTTP server for /chat, /segment and /embed."""

import argparse
import json
import logging
import sys
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from . import models, wire

log = logging.getLogger("reasonseg_shim")


class App:
    def __init__(self, loaded, workers):
        self.models = loaded
        self.slots = threading.BoundedSemaphore(max(1, workers))
        # one device, so model calls run one at a time
        self.device_lock = threading.Lock()

    def handle(self, path, body):
        try:
            doc = json.loads(body)
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            return 400, {"error": f"body is not JSON: {e}"}
        try:
            if path == "/chat":
                model, temperature, messages = wire.parse_chat(doc)
                with self.device_lock:
                    text = self.models["chat"].reply(model, temperature, messages)
                return 200, wire.chat_response(text)
            if path == "/segment":
                _mime, data, prompts = wire.parse_segment(doc)
                with self.device_lock:
                    maps = self.models["segment"].maps(data, prompts)
                return 200, wire.segment_response([wire.encode_map(v, w, h) for v, w, h in maps])
            if path == "/embed":
                _model, texts = wire.parse_embed(doc)
                m = self.models["embed"]
                with self.device_lock:
                    vectors = m.embed(texts)
                return 200, wire.embed_response(vectors, m.dimension)
            return 404, {"error": f"no route {path}"}
        except wire.SchemaError as e:
            return 400, {"error": str(e)}
        except Exception as e:  # model failure
            log.exception("model call failed")
            return 500, {"error": str(e)}


def make_server(app, host, port):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def do_POST(self):
            length = int(self.headers.get("content-length", 0))
            body = self.rfile.read(length)
            with app.slots:
                code, doc = app.handle(self.path, body)
            out = json.dumps(doc).encode()
            self.send_response(code)
            self.send_header("content-type", "application/json")
            self.send_header("content-length", str(len(out)))
            self.end_headers()
            self.wfile.write(out)

        def log_message(self, fmt, *args):
            log.debug(fmt, *args)

    return ThreadingHTTPServer((host, port), Handler)


def main(argv=None):
    p = argparse.ArgumentParser(prog="reasonseg-shim", description=__doc__)
    p.add_argument("--config", help="JSON file with chat/segment/embed/device keys")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000, help="0 picks a free port")
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--chat", help="checkpoint id or 'standin'")
    p.add_argument("--embed", help="checkpoint id or 'standin'")
    p.add_argument("--device")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, stream=sys.stderr)

    config = {}
    if args.config:
        with open(args.config) as f:
            config = json.load(f)
    for key in ("chat", "embed", "device"):
        if getattr(args, key):
            config[key] = getattr(args, key)
    try:
        loaded = models.load(config)
    except Exception as e:
        print(f"error: model load failed: {e}", file=sys.stderr)
        return 1
    server = make_server(App(loaded, args.workers), args.host, args.port)
    host, port = server.server_address[:2]
    # first stdout line is machine readable so callers can find the port
    print(f"listening http://{host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    sys.exit(main())
