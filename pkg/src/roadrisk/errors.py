"""Exception hierarchy. The CLI maps ConfigError to exit code 2 and DataError to 3."""


class RoadRiskError(Exception):
    pass


class ConfigError(RoadRiskError):
    pass


class DataError(RoadRiskError):
    pass


class InvalidGeometryError(DataError):
    pass


class SchemaError(DataError):
    """Feature vector does not match the schema a model was trained on."""


class ConvergenceError(RoadRiskError):
    pass


class UndefinedCorrelationError(RoadRiskError):
    pass
