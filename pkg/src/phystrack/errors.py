"""Exception types raised across the package."""


class InvalidInputError(ValueError):
    pass


class DegenerateProjectionError(InvalidInputError):
    def __init__(self, joint: int, depth: float):
        super().__init__(f"joint {joint} has non-positive camera depth {depth:.6g}")
        self.joint = joint
        self.depth = depth


class DegenerateHullError(InvalidInputError):
    pass


class SimulationDivergedError(RuntimeError):
    def __init__(self, quantity: str, detail: str = ""):
        super().__init__(f"simulation diverged: non-finite {quantity}" + (f" ({detail})" if detail else ""))
        self.quantity = quantity


class ParseError(ValueError):
    def __init__(self, message: str, path=None, field: str | None = None, line: int | None = None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        super().__init__((": ".join([", ".join(where), message])) if where else message)
        self.field = field
        self.line = line


class UnsupportedVersionError(ParseError):
    pass
