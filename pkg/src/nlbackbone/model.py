"""Bundle of a mechanism and a motion with its derived constants and laws."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

from .mechanism import DerivedConstants, Mechanism, OffspringLaws, derive_constants, offspring_laws
from .motion import DisplacementKernel, MotionSpec


@dataclass(frozen=True)
class Model:
    mechanism: Mechanism
    motion: MotionSpec = MotionSpec()
    require_grey: bool = True
    tail_tol: float = 1e-12

    @cached_property
    def constants(self) -> DerivedConstants:
        return derive_constants(self.mechanism, require_grey=self.require_grey)

    @cached_property
    def laws(self) -> OffspringLaws:
        return offspring_laws(self.mechanism, self.constants, self.tail_tol)

    @cached_property
    def conditioned(self) -> Mechanism:
        """Mechanism of the superprocess conditioned on extinction."""
        return self.mechanism.conditioned(self.constants.lambda_star)

    @property
    def lambda_star(self) -> float:
        return self.constants.lambda_star

    @property
    def q(self) -> float:
        return self.constants.q

    @property
    def displacement(self) -> DisplacementKernel:
        return self.mechanism.displacement
