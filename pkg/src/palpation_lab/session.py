"""Search sessions: the state machine the HTTP API and CLI drive.

Lifecycle: created → registered → roi_set → (searching ⇄ paused) → complete.
Probes happen only while searching, and every mutation of one session runs
under its lock, so probe log indices are strictly sequential even under
concurrent requests. Completed steps fan out to subscriber queues (the SSE
feed) and the whole session persists as one JSON archive after each mutation —
the same document ``export`` returns, which is sufficient to replay the run
deterministically.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import queue
import threading
import uuid
from pathlib import Path

import numpy as np

from .config import (
    PhantomSpec,
    parse_cloud_params,
    parse_phantom_config,
    parse_search_config,
    phantom_spec_to_dict,
)
from .errors import (
    ArchiveError,
    BudgetExhausted,
    ConfigError,
    InvalidSessionState,
    PalpationError,
    SearchComplete,
    SessionNotFound,
)
from .overlay import bake_heatmap, blend_textures, flat_base_texture
from .phantom import PointCloud
from .registration import IcpParams, RegistrationResult, icp_register, load_ply
from .search import ROI, SearchSession
from .transforms import RigidTransform

log = logging.getLogger(__name__)

ARCHIVE_FORMAT = "palpation-lab-session/1"

CREATED, REGISTERED, ROI_SET, SEARCHING, PAUSED, COMPLETE = (
    "created",
    "registered",
    "roi_set",
    "searching",
    "paused",
    "complete",
)


def _file_sha256(path: str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Session:
    def __init__(self, session_id: str, spec: PhantomSpec, search_raw: dict, store_dir: Path | None):
        self.id = session_id
        self.lock = threading.RLock()
        self.store_dir = store_dir
        self.spec = spec
        self.search_raw = dict(search_raw)
        self.phantom = spec.build()
        self.status = CREATED
        self.registration: RegistrationResult | None = None
        self.register_request: dict = {}
        self.cloud: PointCloud | None = None
        self.true_pose: RigidTransform | None = None
        self.roi: ROI | None = None
        self.search: SearchSession | None = None
        self.step_log: list[dict] = []
        self.subscribers: list[queue.Queue] = []
        self._pause_requested = False
        self._runner: threading.Thread | None = None

    # -- mutations ---------------------------------------------------------

    def register(self, request: dict | None = None) -> dict:
        request = dict(request or {})
        with self.lock:
            if self.status not in (CREATED, REGISTERED):
                raise InvalidSessionState(f"cannot register while {self.status}")
            cloud, true_pose = self._resolve_cloud(request)
            icp_cfg = request.get("icp", {})
            params = IcpParams(
                max_iterations=int(icp_cfg.get("max_iterations", 60)),
                convergence_tol_mm=float(icp_cfg.get("convergence_tol_mm", 1e-4)),
                trim_fraction=float(icp_cfg.get("trim_fraction", 0.1)),
            )
            init = None if request.get("init") == "pca" else RigidTransform.identity()
            result = icp_register(cloud, self.phantom.mesh, init=init, params=params)
            self.registration = result
            self.register_request = request
            self.cloud = cloud
            self.true_pose = true_pose
            self.status = REGISTERED
            self.persist()
            return self._registration_state()

    def _resolve_cloud(self, request: dict) -> tuple[PointCloud, RigidTransform | None]:
        if "points" in request:
            return PointCloud(np.asarray(request["points"], dtype=float)), None
        if "ply_path" in request:
            return load_ply(request["ply_path"]), None
        merged = {
            "noise_sigma_mm": self.spec.cloud.noise_sigma,
            "visibility_fraction": self.spec.cloud.visibility_fraction,
            "n_points": self.spec.cloud.n_points,
            "seed": self.spec.cloud.seed,
        }
        if self.spec.cloud.true_pose is not None:
            merged["true_pose"] = self.spec.cloud.true_pose.to_json_dict()
        else:
            merged["random_pose"] = {
                "angle_deg": self.spec.cloud.random_angle_deg,
                "translation_mm": self.spec.cloud.random_translation_mm,
            }
        merged.update(request.get("synthesize", {}))
        params = parse_cloud_params(merged)
        spec = PhantomSpec(self.spec.mesh_source, self.spec.stiffness, params)
        return spec.make_cloud(self.phantom)

    def set_roi(self, roi: ROI) -> dict:
        with self.lock:
            if self.status not in (REGISTERED, ROI_SET):
                raise InvalidSessionState(f"cannot set ROI while {self.status}")
            config = parse_search_config(self.search_raw, roi=roi)
            # validates every grid point against the UV atlas up front
            self.search = SearchSession(self.phantom, config)
            self.roi = roi
            self.step_log = []
            self.status = ROI_SET
            self.persist()
            return {
                "grid_res": roi.resolution,
                "n_grid_points": len(self.search.grid),
                "budget": config.budget,
            }

    def _require_search(self) -> SearchSession:
        if self.search is None:
            raise InvalidSessionState("ROI not set")
        return self.search

    def run_step(self) -> dict:
        """Execute exactly one probe synchronously."""
        with self.lock:
            if self.status not in (ROI_SET, PAUSED):
                raise InvalidSessionState(f"cannot step while {self.status}")
            search = self._require_search()
            self.status = SEARCHING
            try:
                report = search.step()
            except (SearchComplete, BudgetExhausted):
                self.status = COMPLETE if search.complete else PAUSED
                self.persist()
                raise
            entry = report.to_json_dict()
            self.step_log.append(entry)
            self.status = COMPLETE if search.complete else PAUSED
            self.persist()
            self._publish({"event": "step", "data": entry})
            if self.status == COMPLETE:
                self._publish({"event": "status", "data": {"status": COMPLETE}})
            return entry

    def run_continuous(self, max_steps: int | None = None) -> dict:
        """Spawn the background search loop; returns immediately."""
        with self.lock:
            if self.status not in (ROI_SET, PAUSED):
                raise InvalidSessionState(f"cannot run while {self.status}")
            self._require_search()
            self._pause_requested = False
            self.status = SEARCHING
            self._runner = threading.Thread(
                target=self._run_loop, args=(max_steps,), daemon=True, name=f"search-{self.id}"
            )
            self._runner.start()
            return {"status": self.status}

    def _run_loop(self, max_steps: int | None) -> None:
        done = 0
        final = PAUSED
        while max_steps is None or done < max_steps:
            if self._pause_requested:
                break
            with self.lock:
                if self.status != SEARCHING:
                    break
                search = self.search
                try:
                    report = search.step()
                except SearchComplete:
                    final = COMPLETE
                    break
                except BudgetExhausted:
                    final = PAUSED
                    break
                except PalpationError as exc:
                    log.warning("session %s: step failed: %s", self.id, exc)
                    self._publish({"event": "error", "data": {"error": str(exc)}})
                    final = PAUSED
                    break
                entry = report.to_json_dict()
                self.step_log.append(entry)
                if search.complete:
                    final = COMPLETE
                self.persist()
                self._publish({"event": "step", "data": entry})
                if search.complete:
                    break
            done += 1
        with self.lock:
            if self.status == SEARCHING:
                self.status = final
            self.persist()
            self._publish({"event": "status", "data": {"status": self.status}})

    def pause(self) -> dict:
        """Request a pause and wait for the loop to acknowledge (no probes after return)."""
        with self.lock:
            if self.status not in (SEARCHING, PAUSED, ROI_SET):
                raise InvalidSessionState(f"cannot pause while {self.status}")
            self._pause_requested = True
            runner = self._runner
        if runner is not None and runner.is_alive():
            runner.join(timeout=60.0)
        with self.lock:
            if self.status == SEARCHING:
                self.status = PAUSED
                self.persist()
            return {"status": self.status, "steps_taken": len(self.step_log)}

    def stop(self) -> dict:
        """Human says done: finalize the session."""
        with self.lock:
            if self.status not in (ROI_SET, SEARCHING, PAUSED):
                raise InvalidSessionState(f"cannot stop while {self.status}")
            self._pause_requested = True
            runner = self._runner
        if runner is not None and runner.is_alive():
            runner.join(timeout=60.0)
        with self.lock:
            self.status = COMPLETE
            self.persist()
            self._publish({"event": "status", "data": {"status": COMPLETE}})
            return {"status": self.status, "steps_taken": len(self.step_log)}

    # -- events --------------------------------------------------------------

    def _publish(self, event: dict) -> None:
        for q in list(self.subscribers):
            q.put(event)

    def subscribe(self, from_step: int = 0) -> tuple[list[dict], queue.Queue]:
        """Replay log entries from from_step, plus a live queue registered atomically."""
        with self.lock:
            replay = [
                {"event": "step", "data": entry} for entry in self.step_log[from_step:]
            ]
            if self.status in (COMPLETE, PAUSED):
                replay.append({"event": "status", "data": {"status": self.status}})
            q: queue.Queue = queue.Queue()
            self.subscribers.append(q)
            return replay, q

    def unsubscribe(self, q: queue.Queue) -> None:
        with self.lock:
            if q in self.subscribers:
                self.subscribers.remove(q)

    # -- snapshots -----------------------------------------------------------

    def _registration_state(self) -> dict:
        if self.registration is None:
            return {"registered": False}
        state = {"registered": True, **self.registration.to_json_dict()}
        if self.true_pose is not None:
            rot_err, trans_err = self.registration.transform.distance_to(self.true_pose)
            state["true_pose"] = self.true_pose.to_json_dict()
            state["rotation_error_deg"] = rot_err
            state["translation_error_mm"] = trans_err
        return state

    def summary(self) -> dict:
        with self.lock:
            out = {
                "id": self.id,
                "status": self.status,
                "steps_taken": len(self.step_log),
                "registered": self.registration is not None,
                "roi": self.roi.to_json_dict() if self.roi else None,
            }
            if self.search is not None:
                grid = self.search.grid
                out["budget"] = self.search.config.budget
                out["n_grid_points"] = len(grid)
                labels = self.step_log[-1] if self.step_log else None
                out["h"] = labels["h"] if labels else None
                out["classification"] = {
                    "n_above": int(np.sum(grid.label == 1)),
                    "n_below": int(np.sum(grid.label == 2)),
                    "n_unknown": int(np.sum(grid.label == 0)),
                }
            if self.registration is not None:
                out["registration_rmse_mm"] = self.registration.rmse
            return out

    def state(self, what: str, opacity: float = 1.0) -> dict:
        with self.lock:
            if what == "summary":
                return self.summary()
            if what == "registration":
                return self._registration_state()
            if what == "probes":
                return {"step": len(self.step_log), "probes": list(self.step_log)}
            if what == "grid":
                search = self._require_search()
                return {"step": len(self.step_log), **search.export_grid()}
            if what == "mesh":
                mesh = self.phantom.mesh
                return {
                    "vertices": mesh.vertices.ravel().tolist(),
                    "faces": mesh.faces.ravel().tolist(),
                    "normals": mesh.normals.ravel().tolist(),
                    "uv": mesh.uv.ravel().tolist(),
                }
            if what == "cloud":
                if self.cloud is None:
                    return {"points": [], "frame": None, "n_total": 0}
                pts = self.cloud.points
                stride = max(1, len(pts) // 3000)
                return {
                    "points": pts[::stride].ravel().tolist(),
                    "frame": self.cloud.frame,
                    "n_total": len(pts),
                }
            if what in ("heatmap", "blended"):
                rgba = self.render(what, opacity)
                return {
                    "step": len(self.step_log),
                    "width": rgba.shape[1],
                    "height": rgba.shape[0],
                    "rgba_b64": base64.b64encode(rgba.tobytes()).decode("ascii"),
                }
            raise ConfigError(f"unknown state kind {what!r}")

    def render(self, what: str, opacity: float = 1.0) -> np.ndarray:
        """RGBA array for the current heat map, optionally blended over a base."""
        with self.lock:
            search = self._require_search()
            heat = bake_heatmap(search.grid, opacity=opacity)
            if what == "heatmap":
                return heat.rgba
            return blend_textures(flat_base_texture(), heat, opacity)

    def heatmap_png(self, what: str = "heatmap", opacity: float = 1.0) -> bytes:
        import io

        from PIL import Image

        rgba = self.render(what, opacity)
        buf = io.BytesIO()
        Image.fromarray(rgba, "RGBA").save(buf, format="PNG")
        return buf.getvalue()

    # -- persistence / export -------------------------------------------------

    def export(self) -> dict:
        with self.lock:
            archive = {
                "format": ARCHIVE_FORMAT,
                "id": self.id,
                "status": self.status,
                "phantom": phantom_spec_to_dict(self.spec),
                "search": dict(self.search_raw),
                "register_request": self.register_request,
                "roi": self.roi.to_json_dict() if self.roi else None,
                "registration": self.registration.to_json_dict() if self.registration else None,
                "true_pose": self.true_pose.to_json_dict() if self.true_pose else None,
                "step_log": list(self.step_log),
                "final_grid": self.search.export_grid() if self.search else None,
            }
            if self.spec.mesh_source != "builtin":
                archive["mesh_sha256"] = _file_sha256(self.spec.mesh_source)
            return archive

    def persist(self) -> None:
        if self.store_dir is None:
            return
        path = self.store_dir / f"{self.id}.json"
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(self.export()))
        tmp.replace(path)

    @classmethod
    def restore(cls, archive: dict, store_dir: Path | None = None, session_id: str | None = None) -> "Session":
        """Rebuild a session from an archive by deterministic replay."""
        if not isinstance(archive, dict) or archive.get("format") != ARCHIVE_FORMAT:
            raise ArchiveError("corrupt archive: unknown format")
        for key in ("phantom", "search", "status"):
            if key not in archive:
                raise ArchiveError(f"corrupt archive: missing {key!r}")
        if archive.get("mesh_sha256"):
            mesh_path = archive["phantom"].get("mesh")
            if not Path(mesh_path).exists():
                raise ArchiveError(f"corrupt archive: mesh file {mesh_path} missing")
            if _file_sha256(mesh_path) != archive["mesh_sha256"]:
                raise ArchiveError("corrupt archive: mesh checksum mismatch")
        try:
            spec = parse_phantom_config(archive["phantom"])
            session = cls(
                session_id=session_id or archive.get("id") or uuid.uuid4().hex[:12],
                spec=spec,
                search_raw=archive["search"],
                store_dir=store_dir,
            )
            if archive.get("registration") is not None:
                session.register(archive.get("register_request") or {})
            if archive.get("roi") is not None:
                session.set_roi(ROI.from_json_dict(archive["roi"]))
                for _ in archive.get("step_log", []):
                    session.run_step()
            if archive["status"] == COMPLETE:
                with session.lock:
                    session.status = COMPLETE
                    session.persist()
        except PalpationError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ArchiveError(f"corrupt archive: {exc!r}") from exc
        return session


class SessionStore:
    """All live sessions, plus the directory their archives persist into."""

    def __init__(self, store_dir: str | Path | None = None):
        self.store_dir = Path(store_dir) if store_dir else None
        if self.store_dir is not None:
            self.store_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._sessions: dict[str, Session] = {}

    def create(self, phantom_config, search_config) -> Session:
        spec = parse_phantom_config(phantom_config)
        search_raw = search_config if isinstance(search_config, dict) else json.loads(Path(search_config).read_text())
        if "roi" in search_raw:
            # validate eagerly so bad configs fail at create time
            parse_search_config(search_raw)
        session_id = uuid.uuid4().hex[:12]
        session = Session(session_id, spec, search_raw, self.store_dir)
        with self._lock:
            self._sessions[session_id] = session
        session.persist()
        return session

    def get(self, session_id: str) -> Session:
        with self._lock:
            try:
                return self._sessions[session_id]
            except KeyError:
                raise SessionNotFound(f"session {session_id} not found") from None

    def list(self) -> list[dict]:
        with self._lock:
            sessions = list(self._sessions.values())
        return [s.summary() for s in sessions]

    def import_archive(self, archive: dict) -> Session:
        session = Session.restore(archive, store_dir=self.store_dir, session_id=uuid.uuid4().hex[:12])
        with self._lock:
            self._sessions[session.id] = session
        session.persist()
        return session
