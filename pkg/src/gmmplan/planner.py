"""Roadmap planning and collision-bound trajectory refinement.

A PRM over tendon-displacement space gives a nominal trajectory whose
states are only required to keep every mixture-component mean out of
collision. The refinement stage then iteratively picks the intermediate
waypoint responsible for the largest share of the trajectory collision
bound, proposes random replacements in a config-space ball around it,
ranks them with a probability-of-improvement acquisition over a small
Gaussian-process surrogate, and accepts a proposal only when the full
trajectory bound strictly improves.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .collision import EnvironmentMesh, config_collision_bound, points_in_collision, \
    trajectory_collision_bound
from .errors import InvalidInputError, NumericalError, ParseError, PathNotFoundError
from .gmm import Gmm3
from .mdn import MdnParams, mdn_forward
from .robot import RobotSpec

SIGMA_FLOOR = 1e-12


@dataclass
class Trajectory:
    """Ordered waypoints (W, m); first and last are the fixed endpoints."""

    waypoints: np.ndarray

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=float)
        if self.waypoints.ndim != 2 or self.waypoints.shape[0] < 2:
            raise InvalidInputError("a trajectory needs at least two waypoints")

    def __len__(self) -> int:
        return self.waypoints.shape[0]


@dataclass
class Roadmap:
    nodes: np.ndarray                  # (N, m)
    edges: list                        # (i, j, length) with i < j

    def adjacency(self) -> dict:
        adj = {i: [] for i in range(len(self.nodes))}
        for i, j, length in self.edges:
            adj[i].append((j, length))
            adj[j].append((i, length))
        return adj


def mean_collision_check(g: Gmm3, env: EnvironmentMesh) -> bool:
    """True iff any component mean is in collision (clearance zero)."""
    return bool(points_in_collision(env, g.means, 0.0).any())


def _config_free(model: MdnParams, env: EnvironmentMesh, config: np.ndarray) -> bool:
    return not mean_collision_check(mdn_forward(model, config), env)


def _edge_valid(model, env, a, b, step) -> bool:
    """All interpolated configs at spacing <= step pass the mean check."""
    dist = float(np.linalg.norm(b - a))
    n_steps = max(1, int(np.ceil(dist / step)))
    for k in range(1, n_steps):
        mid = a + (b - a) * (k / n_steps)
        if not _config_free(model, env, mid):
            return False
    return True


def prm_build(env: EnvironmentMesh, model: MdnParams, spec: RobotSpec,
              n_nodes: int = 500, n_neighbors: int = 10, step: float = 0.002,
              seed: int = 0) -> Roadmap:
    """Sample a roadmap of mean-collision-free configurations.

    Nodes failing the mean check are discarded; each survivor connects to
    its ``n_neighbors`` nearest survivors when the whole interpolated edge
    stays mean-collision-free.
    """
    if n_nodes < 2:
        raise InvalidInputError("need at least 2 roadmap samples")
    rng = np.random.default_rng(seed)
    samples = rng.uniform(spec.d_min, spec.d_max, size=(n_nodes, model.n_inputs))
    nodes = np.array([s for s in samples if _config_free(model, env, s)])
    if len(nodes) == 0:
        return Roadmap(nodes=np.zeros((0, model.n_inputs)), edges=[])
    edges = []
    seen = set()
    for i in range(len(nodes)):
        dists = np.linalg.norm(nodes - nodes[i], axis=1)
        order = np.argsort(dists, kind="stable")
        for j in order[1:n_neighbors + 1]:
            key = (min(i, int(j)), max(i, int(j)))
            if key in seen:
                continue
            seen.add(key)
            if _edge_valid(model, env, nodes[key[0]], nodes[key[1]], step):
                edges.append((key[0], key[1], float(dists[j])))
    return Roadmap(nodes=nodes, edges=edges)


def _dijkstra(adj: dict, source: int, target: int):
    dist = {source: 0.0}
    prev = {}
    heap = [(0.0, source)]
    visited = set()
    while heap:
        d, node = heapq.heappop(heap)
        if node in visited:
            continue
        visited.add(node)
        if node == target:
            break
        for other, length in adj.get(node, ()):
            nd = d + length
            if nd < dist.get(other, np.inf):
                dist[other] = nd
                prev[other] = node
                heapq.heappush(heap, (nd, other))
    if target not in visited:
        return None
    path = [target]
    while path[-1] != source:
        path.append(prev[path[-1]])
    return path[::-1]


def _attach(roadmap, model, env, config, step, side: str) -> int:
    """Index of the nearest roadmap node reachable by a valid edge."""
    if len(roadmap.nodes) == 0:
        raise PathNotFoundError(side, f"roadmap is empty, cannot attach {side}")
    dists = np.linalg.norm(roadmap.nodes - config, axis=1)
    for idx in np.argsort(dists, kind="stable"):
        if _edge_valid(model, env, config, roadmap.nodes[idx], step):
            return int(idx)
    raise PathNotFoundError(side, f"no roadmap node visible from the {side} configuration")


def prm_query(roadmap: Roadmap, start: np.ndarray, goal: np.ndarray,
              env: EnvironmentMesh, model: MdnParams, step: float = 0.002) -> Trajectory:
    """Shortest roadmap path from start to goal, by config-space length."""
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    for side, config in (("start", start), ("goal", goal)):
        if not _config_free(model, env, config):
            raise InvalidInputError(f"{side} configuration fails the mean collision check")
    s_idx = _attach(roadmap, model, env, start, step, "start")
    g_idx = _attach(roadmap, model, env, goal, step, "goal")
    path = _dijkstra(roadmap.adjacency(), s_idx, g_idx)
    if path is None:
        raise PathNotFoundError("goal", "goal attachment is unreachable from the start attachment")
    return Trajectory(np.vstack([start, roadmap.nodes[path], goal]))


# ---------------------------------------------------------------------------
# Gaussian-process surrogate and probability-of-improvement acquisition.
# ---------------------------------------------------------------------------

class SurrogateModel:
    """Squared-exponential GP over (config, bound) observations.

    Predictions center on the observation mean, which keeps the
    acquisition invariant under adding a constant to all observations and
    the incumbent simultaneously.
    """

    def __init__(self, lengthscale: float, signal_variance: float = 1.0,
                 noise_variance: float = 1e-6):
        if lengthscale <= 0 or signal_variance <= 0 or noise_variance < 0:
            raise InvalidInputError("kernel hyperparameters must be positive")
        self.lengthscale = lengthscale
        self.signal_variance = signal_variance
        self.noise_variance = noise_variance
        self.x_obs: list = []
        self.y_obs: list = []

    def add(self, x: np.ndarray, y: float) -> None:
        self.x_obs.append(np.asarray(x, dtype=float).reshape(-1))
        self.y_obs.append(float(y))

    def _kernel(self, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
        sq = np.sum((xa[:, None, :] - xb[None, :, :]) ** 2, axis=2)
        return self.signal_variance * np.exp(-0.5 * sq / self.lengthscale ** 2)

    def predict(self, candidates: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and standard deviation at each candidate."""
        if not self.x_obs:
            raise InvalidInputError("surrogate needs at least one observation")
        x_train = np.array(self.x_obs)
        y = np.array(self.y_obs)
        center = y.mean()
        k_train = self._kernel(x_train, x_train)
        k_train[np.diag_indices_from(k_train)] += self.noise_variance
        try:
            chol = np.linalg.cholesky(k_train)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"surrogate kernel matrix is not positive-definite: {exc}")
        candidates = np.asarray(candidates, dtype=float).reshape(-1, x_train.shape[1])
        k_cross = self._kernel(candidates, x_train)
        alpha = np.linalg.solve(chol.T, np.linalg.solve(chol, y - center))
        mean = center + k_cross @ alpha
        half = np.linalg.solve(chol, k_cross.T)
        var = self.signal_variance - np.sum(half ** 2, axis=0)
        return mean, np.sqrt(np.maximum(var, 0.0))


def pi_acquisition(surrogate: SurrogateModel, candidates, f_best: float,
                   xi: float) -> int:
    """Index of the candidate with the highest probability of improvement.

    PI(x) = Phi((f_best - xi - mean(x)) / sigma(x)); a vanishing sigma
    collapses to the 0/1 limit depending on whether the predicted mean
    already beats f_best - xi. Ties go to the lowest index.
    """
    candidates = np.asarray(candidates, dtype=float)
    if candidates.ndim != 2 or candidates.shape[0] == 0:
        raise InvalidInputError("need a non-empty candidate batch")
    mean, sigma = surrogate.predict(candidates)
    gap = f_best - xi - mean
    with np.errstate(divide="ignore", invalid="ignore"):
        pi = ndtr(gap / sigma)
    flat = sigma < SIGMA_FLOOR
    pi = np.where(flat, np.where(gap > 0, 1.0, 0.0), pi)
    return int(np.argmax(pi))


# ---------------------------------------------------------------------------
# Bound-driven trajectory refinement.
# ---------------------------------------------------------------------------

@dataclass
class OptimizeSettings:
    iterations: int = 50
    samples_per_iteration: int = 20
    radius: float | None = None        # default: 10% of the displacement range
    xi: float = 0.01
    states_per_edge: int = 10
    seed: int = 0


@dataclass
class OptimizationResult:
    trajectory: Trajectory
    history: list                      # incumbent bound, length iterations + 1
    log: list = field(default_factory=list)
    # log rows: (iteration, waypoint_index, candidate_bound, incumbent_bound,
    # accepted)


def trajectory_states(traj: Trajectory, states_per_edge: int = 10) -> np.ndarray:
    """Waypoints plus evenly spaced interior states along every edge."""
    pieces = [traj.waypoints[[0]]]
    for k in range(len(traj) - 1):
        a, b = traj.waypoints[k], traj.waypoints[k + 1]
        fractions = np.arange(1, states_per_edge + 2) / (states_per_edge + 1)
        pieces.append(a + fractions[:, None] * (b - a))
    return np.concatenate(pieces)


def _state_slots(n_waypoints: int, states_per_edge: int):
    """State indices of each waypoint in the trajectory_states layout."""
    return [k * (states_per_edge + 1) for k in range(n_waypoints)]


def state_collision_bounds(model: MdnParams, env: EnvironmentMesh,
                           states: np.ndarray) -> np.ndarray:
    return np.array([
        config_collision_bound(mdn_forward(model, s), env).probability
        for s in states
    ])


def optimize_trajectory(traj: Trajectory, env: EnvironmentMesh, model: MdnParams,
                        spec: RobotSpec,
                        settings: OptimizeSettings | None = None) -> OptimizationResult:
    """Minimize the trajectory collision bound over intermediate waypoints.

    Each iteration retargets the intermediate waypoint whose adjacent
    states carry the largest share of the bound, proposes random
    configurations in a radius ball around it, picks one by probability of
    improvement against that waypoint's surrogate, and accepts only strict
    improvements, so the incumbent history never increases. Endpoints are
    never touched. All randomness derives from (seed, iteration).
    """
    settings = settings or OptimizeSettings()
    radius = settings.radius if settings.radius is not None else 0.1 * spec.d_range
    spe = settings.states_per_edge
    waypoints = traj.waypoints.copy()
    n_way = len(waypoints)
    slots = _state_slots(n_way, spe)

    states = trajectory_states(Trajectory(waypoints), spe)
    bounds = state_collision_bounds(model, env, states)
    incumbent = trajectory_collision_bound(bounds)
    history = [incumbent]
    log = []
    surrogates: dict = {}

    if n_way <= 2 or settings.iterations == 0:
        return OptimizationResult(Trajectory(waypoints), history, log)

    for it in range(settings.iterations):
        # states influenced by waypoint w: everything on its two edges
        shares = []
        for w in range(1, n_way - 1):
            lo, hi = slots[w - 1], slots[w + 1]
            shares.append(bounds[lo + 1:hi].sum())
        target = 1 + int(np.argmax(shares))

        rng = np.random.default_rng(np.random.SeedSequence([settings.seed, it]))
        m = waypoints.shape[1]
        directions = rng.standard_normal((settings.samples_per_iteration, m))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        radii = radius * rng.random(settings.samples_per_iteration) ** (1.0 / m)
        candidates = np.clip(waypoints[target] + directions * radii[:, None],
                             spec.d_min, spec.d_max)

        surrogate = surrogates.get(target)
        if surrogate is None:
            surrogate = SurrogateModel(lengthscale=radius / 2.0)
            surrogate.add(waypoints[target], incumbent)
            surrogates[target] = surrogate
        choice = pi_acquisition(surrogate, candidates, incumbent, settings.xi)
        candidate = candidates[choice]

        # rebuild only the states the moved waypoint influences (its own
        # slot and the interiors of its two edges)
        trial_waypoints = waypoints.copy()
        trial_waypoints[target] = candidate
        lo, hi = slots[target - 1], slots[target + 1]
        trial_states = trajectory_states(
            Trajectory(trial_waypoints[target - 1:target + 2]), spe)
        trial_bounds = bounds.copy()
        trial_bounds[lo + 1:hi] = state_collision_bounds(model, env, trial_states[1:-1])
        candidate_bound = trajectory_collision_bound(trial_bounds)
        surrogate.add(candidate, candidate_bound)

        accepted = candidate_bound < incumbent
        log.append((it, target, candidate_bound, incumbent, accepted))
        if accepted:
            waypoints = trial_waypoints
            bounds = trial_bounds
            incumbent = candidate_bound
        history.append(incumbent)

    return OptimizationResult(Trajectory(waypoints), history, log)


# ---------------------------------------------------------------------------
# Trajectory CSV files.
# ---------------------------------------------------------------------------

def save_trajectory(path, traj: Trajectory) -> None:
    m = traj.waypoints.shape[1]
    with open(path, "w") as fh:
        fh.write(",".join(f"d{i + 1}" for i in range(m)) + "\n")
        for row in traj.waypoints:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def load_trajectory(path) -> Trajectory:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("d1"):
        raise ParseError("trajectory file needs a d1,...,dm header", 0)
    offset = len(lines[0]) + 1
    rows = []
    for line in lines[1:]:
        if line.strip():
            try:
                rows.append([float(v) for v in line.split(",")])
            except ValueError:
                raise ParseError("malformed waypoint row", offset) from None
        offset += len(line) + 1
    return Trajectory(np.array(rows))
