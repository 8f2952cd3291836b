"""Clinician adjudication sessions over retrieved candidate sets.

State lives in an append-only JSONL decision log under the run directory
(fsynced before acknowledgement) plus periodic snapshots; replaying the
log reconstructs sessions exactly, so a killed service restarts cleanly.
Annotators are read-isolated: nobody sees the other annotator's decisions
until adjudication.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import Depends, FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse, PlainTextResponse

from .errors import IncompleteAdjudicationError
from .metrics import AgreementReport, annotator_agreement
from .rrf import Cui

CLASS_LABELS = ("definitive", "context_dependent")
_SNAPSHOT_EVERY = 500


@dataclass
class QueueItem:
    cui: Cui
    name: str
    definition: str | None
    semantic_types: list[str]
    distance: float
    provenance: str

    def to_dict(self) -> dict:
        return {
            "cui": self.cui,
            "name": self.name,
            "definition": self.definition,
            "semantic_types": self.semantic_types,
            "distance": self.distance,
            "provenance": self.provenance,
        }


@dataclass
class Decision:
    include: bool
    label: str | None
    timestamp: float


@dataclass
class ReviewSession:
    session_id: str
    concept_id: str
    annotator_id: str
    queue: list[QueueItem]
    decisions: dict[Cui, Decision] = field(default_factory=dict)

    def queue_cuis(self) -> set[Cui]:
        return {item.cui for item in self.queue}


@dataclass
class AdjudicationRecord:
    concept_id: str
    resolver_id: str
    final: dict[Cui, tuple[bool, str | None]]
    source_sessions: list[str]


def session_id_for(concept_id: str, annotator_id: str) -> str:
    return f"{concept_id}--{annotator_id}"


class ReviewStore:
    """Review state for one run directory.

    Candidate queues are registered from retrieval artifacts; sessions and
    decisions replay from the log on startup.
    """

    def __init__(self, run_dir: str | Path):
        self.run_dir = Path(run_dir)
        self.review_dir = self.run_dir / "review"
        self.review_dir.mkdir(parents=True, exist_ok=True)
        self.log_path = self.review_dir / "decisions.log"
        self.snapshot_path = self.review_dir / "snapshot.json"
        self.candidates: dict[str, list[QueueItem]] = {}
        self.sessions: dict[str, ReviewSession] = {}
        self.adjudications: dict[str, AdjudicationRecord] = {}
        self._log_handle = None
        self._events_since_snapshot = 0

    # -- candidate registration ----------------------------------------

    def register_candidates(self, concept_id: str, items: list[QueueItem]) -> None:
        self.candidates[concept_id] = items

    def load_candidate_artifacts(self) -> int:
        """Scan run_dir/retrieve/*.candidates.json into the store."""
        retrieve_dir = self.run_dir / "retrieve"
        count = 0
        if retrieve_dir.is_dir():
            for path in sorted(retrieve_dir.glob("*.candidates.json")):
                with open(path, "r", encoding="utf-8") as fh:
                    payload = json.load(fh)
                items = [
                    QueueItem(
                        cui=m["cui"],
                        name=m.get("name", ""),
                        definition=m.get("definition"),
                        semantic_types=m.get("semantic_types", []),
                        distance=m["distance"],
                        provenance=m["provenance"],
                    )
                    for m in payload["members"]
                ]
                self.register_candidates(payload["target_id"], items)
                count += 1
        return count

    # -- event log -------------------------------------------------------

    def _append(self, event: dict) -> None:
        if self._log_handle is None:
            self._log_handle = open(self.log_path, "a", encoding="utf-8")
        self._log_handle.write(json.dumps(event, sort_keys=True) + "\n")
        self._log_handle.flush()
        os.fsync(self._log_handle.fileno())
        self._events_since_snapshot += 1
        if self._events_since_snapshot >= _SNAPSHOT_EVERY:
            self.write_snapshot()

    def replay(self) -> int:
        """Rebuild sessions/adjudications from the decision log.

        A torn trailing line (crash mid-append) is tolerated; corruption
        anywhere earlier in the append-only log is an error.
        """
        if not self.log_path.exists():
            return 0
        applied = 0
        lines = self.log_path.read_text(encoding="utf-8").splitlines()
        for i, line in enumerate(lines):
            if not line.strip():
                continue
            try:
                event = json.loads(line)
            except json.JSONDecodeError:
                if i == len(lines) - 1:
                    break
                raise
            self._apply(event)
            applied += 1
        return applied

    def write_snapshot(self) -> None:
        state = {
            "sessions": [
                {
                    "session_id": s.session_id,
                    "concept_id": s.concept_id,
                    "annotator_id": s.annotator_id,
                    "decisions": {
                        cui: {"include": d.include, "class": d.label, "ts": d.timestamp}
                        for cui, d in s.decisions.items()
                    },
                }
                for s in self.sessions.values()
            ],
            "written_at": time.time(),
        }
        tmp = self.snapshot_path.with_suffix(".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(state, fh, sort_keys=True)
        tmp.replace(self.snapshot_path)
        self._events_since_snapshot = 0

    def _apply(self, event: dict) -> None:
        kind = event["type"]
        if kind == "session":
            self._apply_session(event["concept_id"], event["annotator_id"])
        elif kind == "decision":
            session = self.sessions[event["session_id"]]
            session.decisions[event["cui"]] = Decision(
                include=event["include"], label=event.get("class"), timestamp=event["ts"]
            )
        elif kind == "adjudication":
            final = {
                cui: (entry["include"], entry.get("class"))
                for cui, entry in event["final"].items()
            }
            self.adjudications[event["concept_id"]] = AdjudicationRecord(
                concept_id=event["concept_id"],
                resolver_id=event["resolver_id"],
                final=final,
                source_sessions=event["source_sessions"],
            )

    def _apply_session(self, concept_id: str, annotator_id: str) -> ReviewSession:
        sid = session_id_for(concept_id, annotator_id)
        if sid not in self.sessions:
            self.sessions[sid] = ReviewSession(
                session_id=sid,
                concept_id=concept_id,
                annotator_id=annotator_id,
                queue=list(self.candidates[concept_id]),
            )
        return self.sessions[sid]

    # -- operations ------------------------------------------------------

    def create_session(self, concept_id: str, annotator_id: str) -> ReviewSession:
        """Idempotent per (concept, annotator); queue is the candidate list."""
        if concept_id not in self.candidates:
            raise KeyError(f"unknown concept {concept_id!r}")
        sid = session_id_for(concept_id, annotator_id)
        if sid in self.sessions:
            return self.sessions[sid]
        self._append(
            {
                "type": "session",
                "concept_id": concept_id,
                "annotator_id": annotator_id,
                "ts": time.time(),
            }
        )
        return self._apply_session(concept_id, annotator_id)

    def record_decision(
        self, session_id: str, cui: Cui, include: bool, label: str | None = None
    ) -> ReviewSession:
        """Upsert one decision; the log write happens before acknowledgement."""
        session = self.sessions.get(session_id)
        if session is None:
            raise KeyError(f"unknown session {session_id!r}")
        if cui not in session.queue_cuis():
            raise ValueError(f"{cui} is not in this session's queue")
        if include and label not in CLASS_LABELS:
            raise ValueError("an included CUI requires a class label")
        if not include and label is not None:
            raise ValueError("class label is only valid when include is true")
        event = {
            "type": "decision",
            "session_id": session_id,
            "cui": cui,
            "include": include,
            "class": label,
            "ts": time.time(),
        }
        self._append(event)
        self._apply(event)
        return session

    def concept_sessions(self, concept_id: str) -> list[ReviewSession]:
        found = [s for s in self.sessions.values() if s.concept_id == concept_id]
        return sorted(found, key=lambda s: s.annotator_id)

    def _paired_sessions(self, concept_id: str) -> tuple[ReviewSession, ReviewSession]:
        sessions = self.concept_sessions(concept_id)
        if len(sessions) < 2:
            raise ValueError(
                f"concept {concept_id!r} needs two annotator sessions, has {len(sessions)}"
            )
        return sessions[0], sessions[1]

    def live_agreement(
        self, concept_id: str
    ) -> tuple[AgreementReport, AgreementReport | None, int]:
        """(inclusion agreement, class agreement on jointly included, n joint).

        Computed over items decided by both annotators; class agreement is
        None until both annotators include at least one common CUI.
        """
        s1, s2 = self._paired_sessions(concept_id)
        joint = sorted(set(s1.decisions) & set(s2.decisions))
        if not joint:
            raise ValueError("no jointly decided items yet")
        inclusion = annotator_agreement(
            {c: s1.decisions[c].include for c in joint},
            {c: s2.decisions[c].include for c in joint},
        )
        both_included = [
            c for c in joint if s1.decisions[c].include and s2.decisions[c].include
        ]
        category = None
        if both_included:
            category = annotator_agreement(
                {c: s1.decisions[c].label for c in both_included},
                {c: s2.decisions[c].label for c in both_included},
            )
        return inclusion, category, len(joint)

    def disagreements(self, concept_id: str) -> list[dict]:
        """Jointly decided items where inclusion or class differs."""
        s1, s2 = self._paired_sessions(concept_id)
        rows: list[dict] = []
        for cui in sorted(set(s1.decisions) & set(s2.decisions)):
            d1, d2 = s1.decisions[cui], s2.decisions[cui]
            if d1.include != d2.include or (d1.include and d1.label != d2.label):
                item = next((q for q in s1.queue if q.cui == cui), None)
                rows.append(
                    {
                        "cui": cui,
                        "name": item.name if item else "",
                        "annotator1": {"id": s1.annotator_id, "include": d1.include, "class": d1.label},
                        "annotator2": {"id": s2.annotator_id, "include": d2.include, "class": d2.label},
                    }
                )
        return rows

    def adjudicate(
        self,
        concept_id: str,
        resolutions: dict[Cui, tuple[bool, str | None]],
        resolver_id: str,
    ) -> AdjudicationRecord:
        """Resolve every disagreement and persist the final gold decisions.

        Agreed items pass through untouched; each disagreement must appear
        in `resolutions`, otherwise the call fails listing the gaps.
        """
        s1, s2 = self._paired_sessions(concept_id)
        conflicted = {row["cui"] for row in self.disagreements(concept_id)}
        missing = conflicted - set(resolutions)
        if missing:
            raise IncompleteAdjudicationError(sorted(missing))
        for cui, (include, label) in resolutions.items():
            if include and label not in CLASS_LABELS:
                raise ValueError(f"resolution for {cui} requires a class label")

        final: dict[Cui, tuple[bool, str | None]] = {}
        for cui in sorted(set(s1.decisions) & set(s2.decisions)):
            if cui in resolutions:
                include, label = resolutions[cui]
                final[cui] = (include, label if include else None)
            else:
                d = s1.decisions[cui]
                final[cui] = (d.include, d.label if d.include else None)

        event = {
            "type": "adjudication",
            "concept_id": concept_id,
            "resolver_id": resolver_id,
            "final": {
                cui: {"include": inc, "class": label} for cui, (inc, label) in final.items()
            },
            "source_sessions": [s1.session_id, s2.session_id],
            "ts": time.time(),
        }
        self._append(event)
        self._apply(event)
        return self.adjudications[concept_id]

    def export_gold_csv(self, concept_id: str) -> str:
        """Gold-set CSV (cui, name, include, class) from the adjudicated state."""
        record = self.adjudications.get(concept_id)
        if record is None:
            if self.disagreements(concept_id):
                raise IncompleteAdjudicationError(
                    [row["cui"] for row in self.disagreements(concept_id)]
                )
            # Zero disagreements: the jointly decided state is already final.
            record = self.adjudicate(concept_id, {}, resolver_id="auto")
        names = {q.cui: q.name for q in self.candidates.get(concept_id, [])}
        lines = ["cui,name,include,class"]
        for cui in sorted(record.final):
            include, label = record.final[cui]
            name = names.get(cui, "").replace(",", " ")
            lines.append(f"{cui},{name},{'true' if include else 'false'},{label or ''}")
        return "\n".join(lines) + "\n"

    def close(self) -> None:
        if self._log_handle is not None:
            self._log_handle.close()
            self._log_handle = None


# ---------------------------------------------------------------------------
# HTTP service
# ---------------------------------------------------------------------------


@dataclass
class AuthConfig:
    annotator_tokens: dict[str, str]
    resolver_token: str | None = None
    resolver_id: str = "resolver"

    def principal_for(self, token: str) -> tuple[str, str] | None:
        """(role, identity) for a bearer token; None when unknown."""
        for annotator, expected in self.annotator_tokens.items():
            if token == expected:
                return "annotator", annotator
        if self.resolver_token and token == self.resolver_token:
            return "resolver", self.resolver_id
        return None


def create_app(store: ReviewStore, auth: AuthConfig, ui_dir: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="cuiset review service")

    def principal(request: Request) -> tuple[str, str]:
        header = request.headers.get("authorization", "")
        if not header.lower().startswith("bearer "):
            raise HTTPException(status_code=401, detail="bearer token required")
        found = auth.principal_for(header.split(" ", 1)[1].strip())
        if found is None:
            raise HTTPException(status_code=401, detail="unknown token")
        return found

    def own_session(session_id: str, who: tuple[str, str]) -> ReviewSession:
        session = store.sessions.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail="unknown session")
        role, identity = who
        if role != "annotator" or identity != session.annotator_id:
            raise HTTPException(status_code=403, detail="not your session")
        return session

    @app.post("/sessions")
    def create_session(body: dict, who: tuple[str, str] = Depends(principal)):
        role, identity = who
        if role != "annotator":
            raise HTTPException(status_code=403, detail="annotator token required")
        concept_id = body.get("concept_id")
        if not concept_id:
            raise HTTPException(status_code=422, detail="concept_id is required")
        try:
            session = store.create_session(concept_id, identity)
        except KeyError as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc
        return {
            "session_id": session.session_id,
            "concept_id": session.concept_id,
            "annotator_id": session.annotator_id,
            "queue_length": len(session.queue),
        }

    @app.get("/sessions/{session_id}/queue")
    def get_queue(session_id: str, who: tuple[str, str] = Depends(principal)):
        session = own_session(session_id, who)
        items = []
        for item in session.queue:
            decision = session.decisions.get(item.cui)
            payload = item.to_dict()
            payload["decision"] = (
                None
                if decision is None
                else {"include": decision.include, "class": decision.label}
            )
            items.append(payload)
        return {"session_id": session_id, "items": items}

    @app.post("/sessions/{session_id}/decisions")
    def post_decision(session_id: str, body: dict, who: tuple[str, str] = Depends(principal)):
        session = own_session(session_id, who)
        cui = body.get("cui")
        include = body.get("include")
        label = body.get("class")
        if cui is None or include is None:
            raise HTTPException(status_code=422, detail="cui and include are required")
        try:
            store.record_decision(session.session_id, cui, bool(include), label)
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        decided = len(session.decisions)
        return {
            "ok": True,
            "cui": cui,
            "decided": decided,
            "remaining": len(session.queue) - decided,
        }

    @app.get("/concepts/{concept_id}/agreement")
    def get_agreement(concept_id: str, who: tuple[str, str] = Depends(principal)):
        try:
            inclusion, category, n_joint = store.live_agreement(concept_id)
        except ValueError as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from exc
        return {
            "concept_id": concept_id,
            "jointly_decided": n_joint,
            "inclusion": inclusion.to_dict(),
            "category": category.to_dict() if category else None,
        }

    @app.get("/concepts/{concept_id}/disagreements")
    def get_disagreements(concept_id: str, who: tuple[str, str] = Depends(principal)):
        role, _ = who
        if role != "resolver":
            raise HTTPException(status_code=403, detail="resolver token required")
        try:
            rows = store.disagreements(concept_id)
        except ValueError as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from exc
        return {"concept_id": concept_id, "disagreements": rows}

    @app.post("/concepts/{concept_id}/adjudication")
    def post_adjudication(concept_id: str, body: dict, who: tuple[str, str] = Depends(principal)):
        role, identity = who
        if role != "resolver":
            raise HTTPException(status_code=403, detail="resolver token required")
        raw = body.get("resolutions", [])
        resolutions: dict[str, tuple[bool, str | None]] = {}
        for entry in raw:
            resolutions[entry["cui"]] = (bool(entry["include"]), entry.get("class"))
        try:
            record = store.adjudicate(concept_id, resolutions, identity)
        except IncompleteAdjudicationError as exc:
            return JSONResponse(
                status_code=409,
                content={"error": "incomplete adjudication", "unresolved": exc.unresolved},
            )
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        return {
            "concept_id": concept_id,
            "resolved": len(record.final),
            "resolver_id": record.resolver_id,
        }

    @app.get("/concepts/{concept_id}/gold.csv")
    def get_gold(concept_id: str, who: tuple[str, str] = Depends(principal)):
        try:
            csv_text = store.export_gold_csv(concept_id)
        except IncompleteAdjudicationError as exc:
            raise HTTPException(
                status_code=409, detail=f"unresolved disagreements: {exc.unresolved}"
            ) from exc
        except ValueError as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from exc
        return PlainTextResponse(csv_text, media_type="text/csv")

    @app.get("/concepts")
    def list_concepts(who: tuple[str, str] = Depends(principal)):
        return {"concepts": sorted(store.candidates)}

    if ui_dir and Path(ui_dir).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app
