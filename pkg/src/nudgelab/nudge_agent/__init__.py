"""Personalized nudge generation with a pluggable text backend."""

from .agent import (
    AssemblyError,
    Candidate,
    InsufficientDataError,
    NudgeBundle,
    PoolUnderfullError,
    QuantScenario,
    ScreeningExhaustedError,
    Stage2Result,
    UsageFeedback,
    assemble_bundle,
    check_bundle,
    feedback_window,
    generate_bundle,
    load_analogy_table,
    read_bundles,
    render_message,
    round_sig,
    safety_screen,
    stage1_usage_feedback,
    stage2_select,
    stage3_quantify,
    write_bundles,
)
from .backend import BackendError, RemoteBackend, TemplateBackend, make_backend

__all__ = [
    "AssemblyError", "BackendError", "Candidate", "InsufficientDataError", "NudgeBundle",
    "PoolUnderfullError", "QuantScenario", "RemoteBackend", "ScreeningExhaustedError",
    "Stage2Result", "TemplateBackend", "UsageFeedback", "assemble_bundle", "check_bundle",
    "feedback_window", "generate_bundle", "load_analogy_table", "make_backend", "read_bundles", "render_message",
    "round_sig", "safety_screen", "stage1_usage_feedback", "stage2_select", "stage3_quantify",
    "write_bundles",
]
