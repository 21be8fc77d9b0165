"""Exception hierarchy shared across the package."""


class RefinedError(Exception):
    """Base class for all library errors."""


class ConfigError(RefinedError):
    """Invalid or incomplete run configuration."""


class DataError(RefinedError):
    """Malformed or degenerate input data."""


class DuplicateFeatureError(DataError):
    """Two feature columns share the same name."""


class EmptyTableError(DataError):
    """Every sample was removed by cleaning."""


class NumericalError(RefinedError):
    """A numerical procedure cannot proceed on this input."""


class DisconnectedGraphError(NumericalError):
    """The k-NN graph has more than one connected component."""

    def __init__(self, component_sizes):
        self.component_sizes = sorted(component_sizes, reverse=True)
        sizes = ", ".join(str(s) for s in self.component_sizes)
        super().__init__(
            f"neighbor graph is disconnected (component sizes: {sizes}); "
            "increase the neighbor count k"
        )
