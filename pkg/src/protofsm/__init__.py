from protofsm.api import ProtocolFSM


__all__ = ["ProtocolFSM"]
