"""HTTP service wrapping the optimization stack.

Run it with any ASGI server, e.g. ``uvicorn neuropt.service:app``.  The
bundled command-line client talks to this app in-process by default.
"""

from .app import app, create_app

__all__ = ["app", "create_app"]
