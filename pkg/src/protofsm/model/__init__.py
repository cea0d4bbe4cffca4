from protofsm.model.fsm import FsmModel, FsmDiff, Implementation, Transition, Violation

from protofsm.model.fsm import canonicalize_name, determinize, diff, validate

from protofsm.model.document import load_fsm, parse, save_fsm, serialize


__all__ = [
    "FsmModel",
    "FsmDiff",
    "Implementation",
    "Transition",
    "Violation",
    "canonicalize_name",
    "determinize",
    "diff",
    "validate",
    "load_fsm",
    "parse",
    "save_fsm",
    "serialize",
]
