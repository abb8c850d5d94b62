"""Artefact ledger, erroneous-behaviour log, reports and the CLI."""

from amlas_rl.assurance.erroneous import ErroneousBehaviourEntry, Violation, log_erroneous
from amlas_rl.assurance.ledger import (
    ARTEFACTS,
    ArtifactRecord,
    ChainReport,
    DependencyError,
    IntegrityError,
    Ledger,
    record_artifact,
    verify_chain,
)
from amlas_rl.assurance.report import generate_report
