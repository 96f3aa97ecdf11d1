"""Command line entry points.

    palpation-lab run --phantom phantom.json --search search.json --steps 30 \
        --out results/ [--seed 7]
    palpation-lab serve [--host 127.0.0.1] [--port 8420] [--store sessions/]
    palpation-lab mesh --out organ.obj
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import PalpationError


def _cmd_run(args: argparse.Namespace) -> int:
    from .config import parse_phantom_config, parse_search_config
    from .mesh import save_obj
    from .registration import save_ply
    from .session import SessionStore

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    phantom_cfg = json.loads(Path(args.phantom).read_text())
    search_cfg = json.loads(Path(args.search).read_text())
    if args.seed is not None:
        search_cfg["seed"] = args.seed
    parse_phantom_config(phantom_cfg)  # fail fast on bad config
    parse_search_config(search_cfg)

    store = SessionStore(out / "sessions")
    session = store.create(phantom_cfg, search_cfg)
    print(f"session {session.id}")

    reg = session.register({})
    print(f"registered: rmse {reg['rmse']:.3f} mm in {reg['elapsed_s']:.2f} s ({reg['iterations']} iterations)")
    if "rotation_error_deg" in reg:
        print(f"  pose error vs truth: {reg['rotation_error_deg']:.3f} deg / {reg['translation_error_mm']:.3f} mm")
    (out / "registration.json").write_text(json.dumps(reg, indent=2))

    from .search import ROI

    roi = ROI.from_json_dict(search_cfg["roi"])
    grid_info = session.set_roi(roi)
    print(f"roi set: {grid_info['n_grid_points']} grid points at {grid_info['grid_res']}x{grid_info['grid_res']}")

    steps = args.steps if args.steps is not None else session.search.config.budget
    with (out / "steps.jsonl").open("w") as fh:
        for _ in range(steps):
            try:
                entry = session.run_step()
            except PalpationError as exc:
                print(f"stopped: {exc}")
                break
            fh.write(json.dumps(entry) + "\n")
            print(
                f"step {entry['step']:3d}  uv=({entry['probed_uv'][0]:.3f},{entry['probed_uv'][1]:.3f})"
                f"  k={entry['sample']['k_n_per_mm']:.3f} N/mm  h={entry['h']:.3f}"
                f"  above/below/unknown = {entry['n_above']}/{entry['n_below']}/{entry['n_unknown']}"
            )
            if session.status == "complete":
                print("search complete: every grid point classified")
                break

    (out / "grid.json").write_text(json.dumps(session.state("grid")))
    if session.step_log:
        (out / "heatmap.png").write_bytes(session.heatmap_png("heatmap"))
        (out / "blended.png").write_bytes(session.heatmap_png("blended", opacity=args.opacity))
    (out / "session.json").write_text(json.dumps(session.export()))
    if session.cloud is not None:
        save_ply(session.cloud, out / "cloud.ply")
    if args.dump_mesh:
        save_obj(session.phantom.mesh, out / "organ.obj")
    print(f"wrote results to {out}/")
    return 0


def _cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .server import create_app
    from .session import SessionStore

    store = SessionStore(args.store) if args.store else SessionStore()
    app = create_app(store)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def _cmd_mesh(args: argparse.Namespace) -> int:
    from .mesh import make_organ_mesh, save_obj

    mesh = make_organ_mesh()
    save_obj(mesh, args.out)
    print(f"wrote {len(mesh.vertices)} vertices / {len(mesh.faces)} faces to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="palpation-lab", description="virtual palpation laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="headless batch run: register, search, export")
    p_run.add_argument("--phantom", required=True, help="phantom config JSON")
    p_run.add_argument("--search", required=True, help="search config JSON (must include roi)")
    p_run.add_argument("--steps", type=int, default=None, help="probe count (default: config budget)")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--seed", type=int, default=None, help="override the search seed")
    p_run.add_argument("--opacity", type=float, default=0.8, help="blend opacity for blended.png")
    p_run.add_argument("--dump-mesh", action="store_true", help="also write the organ mesh OBJ")
    p_run.set_defaults(func=_cmd_run)

    p_serve = sub.add_parser("serve", help="run the HTTP API server")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8420)
    p_serve.add_argument("--store", default=None, help="directory for session archives")
    p_serve.set_defaults(func=_cmd_serve)

    p_mesh = sub.add_parser("mesh", help="write the builtin organ mesh as OBJ")
    p_mesh.add_argument("--out", required=True)
    p_mesh.set_defaults(func=_cmd_mesh)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PalpationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
