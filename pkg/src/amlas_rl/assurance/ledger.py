"""Append-only, hash-chained artefact ledger for a run directory.

Each committed artefact is one JSON line in ``ledger.txt``; its payload is
copied to ``artifacts/<id>-<sha256[:16]>/payload``. Every line carries the
hash of the previous line, so editing or dropping a committed line breaks
the chain, and every payload is re-hashed by :func:`verify_chain`.

Letters F, G, I-K, Q-T, W, Y, BB and CC belong to the wider assurance
process but are never produced here; they are rejected like any other
unknown id.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

LEDGER_FILE = "ledger.txt"
ARTIFACTS_DIR = "artifacts"
GENESIS = "0" * 64

STAGES = {
    1: "Safety assurance scoping",
    2: "Safety requirements assurance",
    3: "Data and plan management",
    4: "Model learning",
    5: "Model verification",
    6: "Model deployment",
}

ARTEFACTS = {
    "A": (1, "System safety requirements"),
    "B": (1, "Description of operating environment"),
    "C": (1, "System description"),
    "D": (1, "RL component description"),
    "E": (1, "Safety requirements allocated to RL component"),
    "H": (2, "RL safety requirements"),
    "L": (3, "Data requirements"),
    "M": (3, "Data requirements justification report"),
    "N": (3, "Training plan"),
    "O": (3, "Internal test plan"),
    "P": (3, "Verification plan"),
    "U": (4, "RL model development log"),
    "V": (4, "RL model"),
    "X": (4, "Internal test results"),
    "Z": (5, "RL verification results"),
    "AA": (5, "Verification log"),
    "EE": (6, "Operational scenarios"),
    "DD": (6, "Erroneous behaviour log"),
    "FF": (6, "Integration testing results"),
}

# Inputs every output of a stage requires. A-D and EE are external inputs.
_STAGE_INPUTS = {
    1: ("A", "B", "C", "D"),
    2: ("E",),
    3: ("H",),
    4: ("H", "N", "O"),
    5: ("H", "P", "V"),
    6: ("A", "B", "C", "V", "EE"),
}
EXTERNAL_INPUTS = frozenset({"A", "B", "C", "D", "EE"})


def required_inputs(artefact_id: str) -> tuple[str, ...]:
    if artefact_id in EXTERNAL_INPUTS:
        return ()
    return _STAGE_INPUTS[ARTEFACTS[artefact_id][0]]


class LedgerError(Exception):
    pass


class DependencyError(LedgerError):
    def __init__(self, artefact_id: str, missing: list[str]):
        self.artefact_id = artefact_id
        self.missing = list(missing)
        super().__init__(f"cannot commit {artefact_id}: missing input artefact(s) {', '.join(self.missing)}")


class IntegrityError(LedgerError):
    pass


class UnknownArtefactError(LedgerError, KeyError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    now = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return now.strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True)
class ArtifactRecord:
    seq: int
    artefact_id: str
    stage: int
    label: str
    version: int
    payload: str  # relative to the run directory
    sha256: str
    created_at: str
    parents: dict[str, str]  # parent id -> parent payload hash at commit time
    kind: str  # "evidence" or "fixture" (opaque prose stand-in)
    prev: str
    record_hash: str = ""

    def body(self) -> dict:
        d = asdict(self)
        d.pop("record_hash")
        return d

    def compute_hash(self) -> str:
        return hashlib.sha256(_canonical(self.body())).hexdigest()

    def to_line(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))


@dataclass
class Ledger:
    """In-memory view of ``<root>/ledger.txt``; writes go straight to disk."""

    root: Path
    records: list[ArtifactRecord] = field(default_factory=list)
    index: dict[str, ArtifactRecord] = field(default_factory=dict)

    @classmethod
    def open(cls, root) -> "Ledger":
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        ledger = cls(root)
        path = root / LEDGER_FILE
        if path.exists():
            for lineno, line in enumerate(path.read_text().splitlines(), start=1):
                if not line.strip():
                    continue
                try:
                    rec = ArtifactRecord(**json.loads(line))
                except (ValueError, TypeError) as exc:
                    raise IntegrityError(f"{path}:{lineno}: unreadable ledger record ({exc})") from None
                ledger.records.append(rec)
                ledger.index[rec.artefact_id] = rec
        return ledger

    @property
    def path(self) -> Path:
        return self.root / LEDGER_FILE

    def __contains__(self, artefact_id: str) -> bool:
        return artefact_id in self.index

    def latest(self, artefact_id: str) -> ArtifactRecord:
        try:
            return self.index[artefact_id]
        except KeyError:
            raise DependencyError(artefact_id, [artefact_id]) from None

    def payload_path(self, artefact_id: str) -> Path:
        return self.root / self.latest(artefact_id).payload

    def read_payload(self, artefact_id: str) -> bytes:
        rec = self.latest(artefact_id)
        data = (self.root / rec.payload).read_bytes()
        if hashlib.sha256(data).hexdigest() != rec.sha256:
            raise IntegrityError(f"payload of {artefact_id} no longer matches its committed hash")
        return data

    def head(self) -> str:
        return self.records[-1].record_hash if self.records else GENESIS

    def manifest(self) -> dict:
        """Machine-readable evidence summary: latest record per artefact."""
        return {
            "head": self.head(),
            "artefacts": {
                aid: {"stage": r.stage, "label": r.label, "sha256": r.sha256, "version": r.version, "kind": r.kind, "parents": sorted(r.parents)}
                for aid, r in sorted(self.index.items(), key=lambda kv: (kv[1].stage, kv[0]))
            },
        }


def record_artifact(
    ledger: Ledger,
    artefact_id: str,
    stage: int,
    payload_path,
    parents=None,
    kind: str = "evidence",
) -> ArtifactRecord:
    """Copy ``payload_path`` into the run directory and append a record.

    ``parents`` defaults to the stage inputs; any extra parents must already
    be committed as well.
    """
    if artefact_id not in ARTEFACTS:
        raise UnknownArtefactError(f"unknown artefact id {artefact_id!r}")
    expected_stage, label = ARTEFACTS[artefact_id]
    if stage != expected_stage:
        raise LedgerError(f"artefact {artefact_id} belongs to stage {expected_stage}, not {stage}")
    src = Path(payload_path)
    if not src.is_file():
        raise FileNotFoundError(f"payload {src} does not exist")

    wanted = list(required_inputs(artefact_id))
    for p in parents or ():
        if p not in wanted:
            wanted.append(p)
    missing = [p for p in wanted if p not in ledger]
    if missing:
        raise DependencyError(artefact_id, missing)

    digest = sha256_file(src)
    rel = Path(ARTIFACTS_DIR) / f"{artefact_id}-{digest[:16]}" / "payload"
    dest = ledger.root / rel
    if dest.exists():
        if sha256_file(dest) != digest:
            raise IntegrityError(f"{rel} already holds different bytes")
    else:
        dest.parent.mkdir(parents=True, exist_ok=True)
        tmp = dest.with_name(".payload.tmp")
        shutil.copyfile(src, tmp)
        os.replace(tmp, dest)

    version = 1 + sum(r.artefact_id == artefact_id for r in ledger.records)
    rec = ArtifactRecord(
        seq=len(ledger.records),
        artefact_id=artefact_id,
        stage=stage,
        label=label,
        version=version,
        payload=rel.as_posix(),
        sha256=digest,
        created_at=_timestamp(),
        parents={p: ledger.index[p].sha256 for p in wanted},
        kind=kind,
        prev=ledger.head(),
    )
    rec = ArtifactRecord(**{**asdict(rec), "record_hash": rec.compute_hash()})
    with open(ledger.path, "a") as fh:
        fh.write(rec.to_line() + "\n")
        fh.flush()
        os.fsync(fh.fileno())
    ledger.records.append(rec)
    ledger.index[artefact_id] = rec
    return rec


def record_bytes(ledger: Ledger, artefact_id: str, data: bytes, parents=None, kind: str = "evidence", staging=None) -> ArtifactRecord:
    """Convenience wrapper: stage ``data`` in a temporary file and commit it."""
    staging = Path(staging or ledger.root / ".staging")
    staging.mkdir(parents=True, exist_ok=True)
    tmp = staging / f"{artefact_id}.tmp"
    tmp.write_bytes(data)
    try:
        return record_artifact(ledger, artefact_id, ARTEFACTS[artefact_id][0], tmp, parents, kind)
    finally:
        tmp.unlink(missing_ok=True)


@dataclass(frozen=True)
class ChainIssue:
    seq: int
    artefact_id: str
    problem: str

    def __str__(self) -> str:
        return f"record {self.seq} ({self.artefact_id}): {self.problem}"


@dataclass(frozen=True)
class ChainReport:
    n_records: int
    issues: tuple[ChainIssue, ...]

    @property
    def passed(self) -> bool:
        return not self.issues

    @property
    def first_failure(self) -> ChainIssue | None:
        return self.issues[0] if self.issues else None

    def summary(self) -> str:
        if self.passed:
            return f"ledger OK: {self.n_records} records, chain and payload hashes verified"
        return f"ledger FAILED at {self.first_failure} ({len(self.issues)} issue(s))"


def verify_chain(root) -> ChainReport:
    """Re-hash every payload, walk the chain and check dependency closure.

    Never raises for ledger content problems; they are listed in the report.
    """
    root = Path(root)
    path = root / LEDGER_FILE
    issues: list[ChainIssue] = []
    if not path.exists():
        return ChainReport(0, (ChainIssue(-1, "-", f"{LEDGER_FILE} not found"),))
    prev = GENESIS
    seen: dict[str, str] = {}
    n = 0
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        n += 1
        try:
            rec = ArtifactRecord(**json.loads(line))
        except (ValueError, TypeError):
            issues.append(ChainIssue(n - 1, "?", f"line {lineno} is not a ledger record"))
            prev = None
            continue
        aid = rec.artefact_id
        if rec.record_hash != rec.compute_hash():
            issues.append(ChainIssue(rec.seq, aid, "record contents do not match its record hash"))
        if prev is not None and rec.prev != prev:
            issues.append(ChainIssue(rec.seq, aid, "chain link broken (previous-record hash mismatch)"))
        if rec.seq != n - 1:
            issues.append(ChainIssue(rec.seq, aid, f"sequence number {rec.seq}, expected {n - 1}"))
        if aid not in ARTEFACTS:
            issues.append(ChainIssue(rec.seq, aid, "unknown artefact id"))
        elif ARTEFACTS[aid][0] != rec.stage:
            issues.append(ChainIssue(rec.seq, aid, f"stage {rec.stage} does not match artefact table"))
        payload = root / rec.payload
        if not payload.is_file():
            issues.append(ChainIssue(rec.seq, aid, f"payload {rec.payload} missing"))
        elif sha256_file(payload) != rec.sha256:
            issues.append(ChainIssue(rec.seq, aid, f"payload {rec.payload} hash mismatch (edited after commit)"))
        if aid in ARTEFACTS:
            gaps = [p for p in required_inputs(aid) if p not in seen]
            if gaps:
                issues.append(ChainIssue(rec.seq, aid, f"dependency gap: {', '.join(gaps)} not committed before it"))
        for p, h in rec.parents.items():
            if p not in seen:
                issues.append(ChainIssue(rec.seq, aid, f"parent {p} not committed before it"))
            elif seen[p] != h:
                issues.append(ChainIssue(rec.seq, aid, f"parent {p} hash does not match any committed version"))
        seen[aid] = rec.sha256
        prev = rec.record_hash
    return ChainReport(n, tuple(issues))
