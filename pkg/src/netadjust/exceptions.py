class TopologyError(ValueError):
    """Structural problem in a network topology or topology file."""

    def __init__(self, message, where=None):
        self.where = where
        super().__init__(f"{where}: {message}" if where else message)


class ConfigError(ValueError):
    """Invalid run configuration or channel configuration."""

    def __init__(self, message, field=None, where=None):
        self.field = field
        self.where = where
        prefix = ":".join(str(p) for p in (where, field) if p)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class InfeasibleBudgetError(RuntimeError):
    def __init__(self, message, closest_config=None, closest_flops=None):
        self.closest_config = closest_config
        self.closest_flops = closest_flops
        super().__init__(message)


class ProbeError(RuntimeError):
    def __init__(self, message, layer_id=None):
        self.layer_id = layer_id
        super().__init__(f"layer {layer_id}: {message}" if layer_id is not None else message)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, message, iteration=None, activation_max=None):
        self.iteration = iteration
        self.activation_max = activation_max or {}
        super().__init__(message)


class SearchSpaceTooLarge(ValueError):
    def __init__(self, cardinality, cap):
        self.cardinality = cardinality
        self.cap = cap
        super().__init__(f"search space has {cardinality} configurations, above the cap of {cap}")
