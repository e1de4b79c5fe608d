"""Excepciones del paquete. Todas derivan de BranchingError."""

from typing import Optional


class BranchingError(Exception):
    """Error base; `location` señala la clave o el objeto que lo provocó."""

    def __init__(self, message: str, location: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.location = location

    def __str__(self) -> str:
        if self.location:
            return f"{self.location}: {self.message}"
        return self.message

    def to_dict(self) -> dict:
        return {"error": type(self).__name__, "message": self.message, "location": self.location}


class ModelError(BranchingError):
    pass


class SpectralError(BranchingError):
    pass


class CharacteristicError(BranchingError):
    pass


class ConstantsError(BranchingError):
    pass


class SimulationError(BranchingError):
    pass


class StatsError(BranchingError):
    pass


class ScenarioError(BranchingError):
    pass
