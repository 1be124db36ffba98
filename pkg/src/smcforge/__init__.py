"""SOS-based synthesis of sliding manifolds and sliding-mode controllers for polynomial systems."""

from .polynomial import IndeterminateSet, ParseError, Polynomial, PolyMap, StructureError, format_polynomial
from .sim import PerturbationModel, Trajectory, reaching_metrics, roa_sample_report, settling_time, simulate
from .smc import ControlLaw, RegularFormSystem, SlackDefinition, control, equivalent_control, sliding_dynamics
from .sosprog import ClarabelSolver, GramCertificate, SosProgram, check_certificate, gram_basis, is_sos
from .synthesis import (
    SynthesisConfig,
    SynthesisResult,
    build_l,
    certify_fixed,
    maximize_beta,
    maximize_c,
    solve_certificate_step,
    synthesize,
    synthesize_finite_time,
    synthesize_global,
    synthesize_roa,
    verify_result,
)

__all__ = [
    "ClarabelSolver",
    "ControlLaw",
    "GramCertificate",
    "IndeterminateSet",
    "ParseError",
    "PerturbationModel",
    "PolyMap",
    "Polynomial",
    "RegularFormSystem",
    "SlackDefinition",
    "SosProgram",
    "StructureError",
    "SynthesisConfig",
    "SynthesisResult",
    "Trajectory",
    "build_l",
    "certify_fixed",
    "check_certificate",
    "control",
    "equivalent_control",
    "format_polynomial",
    "gram_basis",
    "is_sos",
    "maximize_beta",
    "maximize_c",
    "reaching_metrics",
    "roa_sample_report",
    "settling_time",
    "simulate",
    "sliding_dynamics",
    "solve_certificate_step",
    "synthesize",
    "synthesize_finite_time",
    "synthesize_global",
    "synthesize_roa",
    "verify_result",
]
