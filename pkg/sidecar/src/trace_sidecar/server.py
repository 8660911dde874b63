"""HTTP front end: POST /generate returning trace JSON, GET /health."""
from __future__ import annotations

import argparse
import logging

import torch
import uvicorn
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .tracing import ATTENTION_POLICY, TRACE_FORMAT, GenerationParams, SidecarConfig, SidecarError, TraceGenerator

logger = logging.getLogger("trace_sidecar")

_ERROR_STATUS = {
    "bad_request": 400,
    "policy_mismatch": 400,
    "context_overflow": 400,
    "detokenization_drift": 500,
    "oom": 500,
}


def create_app(generator: TraceGenerator) -> FastAPI:
    app = FastAPI(title="trace-sidecar")

    @app.get("/health")
    def health():
        return {
            "model": generator.config.model_path,
            "attention_policy": generator.config.attention_policy,
            "format": TRACE_FORMAT,
            "vocab_size": generator.vocab_size,
            "max_context": generator.config.max_context,
        }

    @app.post("/generate")
    async def generate(request: Request):
        payload = await request.json()
        requested_policy = payload.get("attention_policy")
        try:
            if requested_policy is not None and requested_policy != ATTENTION_POLICY:
                raise SidecarError(
                    "policy_mismatch",
                    f"sidecar serves {ATTENTION_POLICY!r}, request expects {requested_policy!r}",
                )
            params = GenerationParams.from_payload(payload)
            trace = generator.generate(params)
        except SidecarError as exc:
            status = _ERROR_STATUS.get(exc.code, 500)
            return JSONResponse(
                status_code=status, content={"error": {"code": exc.code, "message": str(exc)}}
            )
        except torch.cuda.OutOfMemoryError as exc:  # pragma: no cover
            return JSONResponse(
                status_code=500, content={"error": {"code": "oom", "message": str(exc)}}
            )
        return JSONResponse(content=trace)

    return app


def serve(config: SidecarConfig, host: str = "127.0.0.1", port: int = 8008) -> None:
    generator = TraceGenerator(config)
    logger.info("serving %s on %s:%d", config.model_path, host, port)
    uvicorn.run(create_app(generator), host=host, port=port, log_level="warning")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="trace-sidecar", description=__doc__)
    parser.add_argument("--model", required=True, help="model path or hub identifier")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8008)
    parser.add_argument("--max-context", type=int, default=4096)
    parser.add_argument("--sample", action="store_true", help="sample instead of greedy decoding")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO)
    serve(
        SidecarConfig(
            model_path=args.model,
            device=args.device,
            max_context=args.max_context,
            greedy=not args.sample,
        ),
        host=args.host,
        port=args.port,
    )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
