"""Sampling the backbone: a branching diffusion with Ulam-Harris labels."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .errors import OutOfHorizon, PopulationExplosion
from .model import Model
from .motion import MotionSpec, sample_displacement, sample_path

__all__ = [
    "LOCAL",
    "NONLOCAL",
    "ALIVE",
    "AtomicMeasure",
    "BackboneNode",
    "BackboneTree",
    "sample_tree",
    "poissonize",
    "evaluate_Z",
    "audit",
]

LOCAL = "local"
NONLOCAL = "nonlocal"
ALIVE = "alive"

Label = Tuple[int, ...]


@dataclass(frozen=True)
class AtomicMeasure:
    """Finite sum of weighted Dirac masses in R^d."""

    masses: np.ndarray
    locations: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.masses, dtype=float).reshape(-1)
        x = np.asarray(self.locations, dtype=float)
        if x.ndim == 1:
            x = x.reshape(m.size, -1) if m.size else x.reshape(0, 1)
        if x.shape[0] != m.size:
            raise ValueError("one location per mass is required")
        if np.any(m <= 0) or not np.all(np.isfinite(m)):
            raise ValueError("masses must be positive and finite")
        object.__setattr__(self, "masses", m)
        object.__setattr__(self, "locations", x)

    @classmethod
    def empty(cls, dimension: int = 1) -> "AtomicMeasure":
        return cls(np.zeros(0), np.zeros((0, dimension)))

    @classmethod
    def dirac(cls, x=0.0, mass: float = 1.0) -> "AtomicMeasure":
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return cls(np.array([mass]), x[None, :])

    @property
    def n_atoms(self) -> int:
        return int(self.masses.size)

    @property
    def dimension(self) -> int:
        return int(self.locations.shape[1])

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum())

    def integrate(self, fn) -> float:
        """<fn, measure> for fn taking an (n, d) or (n,) array of points."""
        if self.n_atoms == 0:
            return 0.0
        pts = self.locations[:, 0] if self.dimension == 1 else self.locations
        vals = np.broadcast_to(np.asarray(fn(pts), dtype=float), self.masses.shape)
        return float(self.masses @ vals)


@dataclass
class BackboneNode:
    label: Label
    tau: float
    sigma: float
    times: np.ndarray
    path: np.ndarray
    branch_type: str
    n_offspring: int = 0
    child_positions: Optional[np.ndarray] = None

    @property
    def parent(self) -> Optional[Label]:
        return self.label[:-1] or None

    @property
    def birth_position(self) -> np.ndarray:
        return self.path[0]

    @property
    def death_position(self) -> np.ndarray:
        return self.path[-1]

    def position(self, t: float) -> np.ndarray:
        """Position at time t in [tau, sigma], linear between stored samples."""
        if t <= self.times[0]:
            return self.path[0]
        if t >= self.times[-1]:
            return self.path[-1]
        j = int(np.searchsorted(self.times, t, side="right")) - 1
        w = (t - self.times[j]) / (self.times[j + 1] - self.times[j])
        return (1 - w) * self.path[j] + w * self.path[j + 1]


@dataclass
class BackboneTree:
    nodes: Dict[Label, BackboneNode]
    horizon: float
    initial: AtomicMeasure
    dt: float
    valid: bool = True
    meta: dict = field(default_factory=dict)

    def __iter__(self) -> Iterator[BackboneNode]:
        return iter(self.nodes.values())

    def __len__(self) -> int:
        return len(self.nodes)

    def branch_points(self) -> List[BackboneNode]:
        return [n for n in self.nodes.values() if n.branch_type != ALIVE]

    def to_lines(self) -> List[str]:
        """One tab-separated line per node: label, parent, tau, sigma, type, N, path."""
        out = []
        for node in self.nodes.values():
            parent = node.parent
            path = ";".join(
                f"{t:.17g}:" + ",".join(f"{c:.17g}" for c in x) for t, x in zip(node.times, node.path)
            )
            out.append(
                "\t".join(
                    [
                        ".".join(map(str, node.label)),
                        ".".join(map(str, parent)) if parent else "-",
                        f"{node.tau:.17g}",
                        f"{node.sigma:.17g}",
                        node.branch_type,
                        str(node.n_offspring),
                        path,
                    ]
                )
            )
        return out

    @classmethod
    def from_lines(cls, lines, horizon: float, initial: AtomicMeasure, dt: float) -> "BackboneTree":
        nodes: Dict[Label, BackboneNode] = {}
        for line in lines:
            label, _, tau, sigma, kind, n, path = line.rstrip("\n").split("\t")
            pts = [p.split(":") for p in path.split(";")]
            times = np.array([float(t) for t, _ in pts])
            xs = np.array([[float(c) for c in x.split(",")] for _, x in pts])
            lab = tuple(int(i) for i in label.split("."))
            nodes[lab] = BackboneNode(lab, float(tau), float(sigma), times, xs, kind, int(n))
        tree = cls(nodes, horizon, initial, dt)
        for node in nodes.values():
            if node.n_offspring:
                kids = [nodes[node.label + (i,)] for i in range(1, node.n_offspring + 1)]
                node.child_positions = np.array([k.path[0] for k in kids])
        return tree


def _grid_times(tau: float, sigma: float, dt: float) -> np.ndarray:
    k0 = math.floor(tau / dt + 1e-9) + 1
    k1 = math.ceil(sigma / dt - 1e-9) - 1
    inner = dt * np.arange(k0, k1 + 1) if k1 >= k0 else np.zeros(0)
    return np.concatenate([[tau], inner, [sigma]])


def sample_tree(
    nu: AtomicMeasure,
    T: float,
    model: Model,
    rng: np.random.Generator,
    dt: float = 0.01,
    cap: int = 1_000_000,
) -> BackboneTree:
    """Run the backbone from one particle per atom of ``nu`` up to time T.

    Paths are stored at birth, at death and at every multiple of dt in
    between.  Particles alive at T get ``sigma = T`` and type ``ALIVE``.
    """
    if T <= 0:
        raise ValueError("horizon must be positive")
    if not np.allclose(nu.masses, 1.0):
        raise ValueError("backbone initial configurations have unit masses")
    motion: MotionSpec = model.motion
    if nu.n_atoms and nu.dimension != motion.dimension:
        raise ValueError("initial configuration and motion disagree on dimension")
    q = model.q
    laws = model.laws
    kernel = model.displacement
    nodes: Dict[Label, BackboneNode] = {}
    tree = BackboneTree(nodes, float(T), nu, float(dt))
    stack = [((i + 1,), 0.0, nu.locations[i]) for i in range(nu.n_atoms - 1, -1, -1)]
    while stack:
        label, tau, x0 = stack.pop()
        life = rng.exponential(1.0 / q)
        if tau + life >= T:
            sigma, kind = float(T), ALIVE
        else:
            sigma = tau + life
            is_local, n = laws.sample(rng)
            kind = LOCAL if is_local else NONLOCAL
        times = _grid_times(tau, sigma, dt)
        path = sample_path(motion, x0, times, rng)
        node = BackboneNode(label, tau, sigma, times, path, kind)
        nodes[label] = node
        if kind != ALIVE:
            n = int(n)
            end = path[-1]
            if kind == LOCAL:
                kids = np.repeat(end[None, :], n, axis=0)
            else:
                kids = end[None, :] + sample_displacement(kernel, rng, n, motion.dimension)
            node.n_offspring = n
            node.child_positions = kids
            if len(nodes) + len(stack) + n > cap:
                tree.valid = False
                raise PopulationExplosion(f"backbone exceeded {cap} particles before time {T}", partial=tree)
            for i in range(n, 0, -1):
                stack.append((label + (i,), sigma, kids[i - 1]))
    return tree


def poissonize(mu: AtomicMeasure, lambda_star: float, rng: np.random.Generator) -> AtomicMeasure:
    """Poisson random measure with intensity lambda* mu, as unit atoms."""
    if mu.n_atoms == 0:
        return AtomicMeasure.empty(mu.dimension)
    total = mu.total_mass
    k = int(rng.poisson(lambda_star * total))
    if k == 0:
        return AtomicMeasure.empty(mu.dimension)
    idx = rng.choice(mu.n_atoms, size=k, p=mu.masses / total) if mu.n_atoms > 1 else np.zeros(k, int)
    return AtomicMeasure(np.ones(k), mu.locations[idx])


def evaluate_Z(tree: BackboneTree, t: float) -> AtomicMeasure:
    """Unit atoms at the positions of the particles alive at time t."""
    if t < 0 or t > tree.horizon + 1e-12:
        raise OutOfHorizon(f"t = {t} outside [0, {tree.horizon}]")
    at_end = t >= tree.horizon - 1e-12
    pts = [
        node.position(t)
        for node in tree.nodes.values()
        if node.tau <= t and (t < node.sigma or (at_end and node.branch_type == ALIVE))
    ]
    dim = tree.initial.dimension
    if not pts:
        return AtomicMeasure.empty(dim)
    return AtomicMeasure(np.ones(len(pts)), np.array(pts))


def audit(tree: BackboneTree, atol: float = 1e-12) -> List[str]:
    """Structural problems of a tree; an empty list means it is consistent."""
    problems = []
    roots = {n.label for n in tree.nodes.values() if len(n.label) == 1}
    if len(roots) != tree.initial.n_atoms:
        problems.append(f"{len(roots)} roots for {tree.initial.n_atoms} initial atoms")
    for node in tree.nodes.values():
        lab = ".".join(map(str, node.label))
        if not node.tau < node.sigma:
            problems.append(f"{lab}: tau {node.tau} not below sigma {node.sigma}")
        if node.times[0] != node.tau or node.times[-1] != node.sigma:
            problems.append(f"{lab}: path does not span [tau, sigma]")
        if len(node.label) == 1:
            start = tree.initial.locations[node.label[0] - 1]
            if node.tau != 0 or not np.allclose(node.path[0], start, atol=atol):
                problems.append(f"{lab}: root does not start from its initial atom")
        else:
            parent = tree.nodes.get(node.label[:-1])
            if parent is None:
                problems.append(f"{lab}: parent missing")
                continue
            if abs(parent.sigma - node.tau) > atol:
                problems.append(f"{lab}: born at {node.tau}, parent died at {parent.sigma}")
            if parent.branch_type == LOCAL and not np.allclose(node.path[0], parent.path[-1], atol=atol):
                problems.append(f"{lab}: local child not born at parent's death position")
        if node.branch_type == ALIVE:
            if node.sigma != tree.horizon or node.n_offspring:
                problems.append(f"{lab}: alive-at-horizon node with sigma {node.sigma}")
        else:
            low = 2 if node.branch_type == LOCAL else 1
            if node.n_offspring < low:
                problems.append(f"{lab}: {node.branch_type} branching with {node.n_offspring} children")
            for i in range(1, node.n_offspring + 1):
                if node.label + (i,) not in tree.nodes:
                    problems.append(f"{lab}: child {i} missing")
    return problems
