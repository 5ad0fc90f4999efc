"""Exception hierarchy shared by every module of the package."""


class RobustSFDAError(Exception):
    """Base class; the CLI turns these into machine-readable error JSON."""

    kind = "error"

    def to_dict(self):
        return {"error": self.kind, "message": str(self)}


class DimensionError(RobustSFDAError, ValueError):
    kind = "dimension_error"


class NumericError(RobustSFDAError, FloatingPointError):
    kind = "numeric_error"


class StateError(RobustSFDAError, RuntimeError):
    kind = "state_error"


class LabelError(RobustSFDAError, ValueError):
    kind = "label_error"


class CoverageError(RobustSFDAError, ValueError):
    kind = "coverage_error"


class DomainError(RobustSFDAError, ValueError):
    kind = "domain_error"


class DegenerateError(RobustSFDAError, ValueError):
    kind = "degenerate_error"


class ConfigError(RobustSFDAError, ValueError):
    kind = "config_error"


class ParseError(RobustSFDAError, ValueError):
    kind = "parse_error"

    def __init__(self, message, line=None, column=None):
        super().__init__(message)
        self.line = line
        self.column = column

    def to_dict(self):
        d = super().to_dict()
        d.update(line=self.line, column=self.column)
        return d


class SchemaError(RobustSFDAError, ValueError):
    kind = "schema_error"


class ValidationError(ConfigError):
    """Config validation failure listing every violated field."""

    kind = "validation_error"

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(f"{k}: {v}" for k, v in self.problems))

    def to_dict(self):
        d = super().to_dict()
        d["fields"] = {k: v for k, v in self.problems}
        return d
