"""Discrete indoor-scene simulator.

Scenes are occupancy grids whose non-free cells are either obstacles or
target objects.  Grid coordinates are ``(x, y)`` = (column, row) with
``rows[y][x]`` holding the cell character.  Headings are measured in the
index plane: 0 deg points to +x, 90 deg to +y, and RotateLeft adds 45 deg.

Scene geometry is immutable after construction, so per-pose lookups (ray
casts, the goal distance field) are memoised on the scene object.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from pathlib import Path

import numpy as np

SCENE_HEADER = "cfnav-scene v1"

FREE_CHAR = "."
OBSTACLE_CHAR = "#"

HEADINGS = (0, 45, 90, 135, 180, 225, 270, 315)
PITCHES = (-30, 0, 30)
HEADING_VECTORS = {
    0: (1, 0),
    45: (1, 1),
    90: (0, 1),
    135: (-1, 1),
    180: (-1, 0),
    225: (-1, -1),
    270: (0, -1),
    315: (1, -1),
}

VISIBILITY_RANGE = 1.5  # meters
FIELD_OF_VIEW = 90.0  # degrees, horizontal
N_RAYS = 15
RAY_MAX_RANGE = 2.0  # meters
DEFAULT_NOISE_SIGMA = 0.02

DEFAULT_CLASS_NAMES = (
    "Mug", "Laptop", "Plant", "Book", "Lamp", "Pillow", "Television", "Vase",
    "Bowl", "Clock", "Kettle", "Toaster", "Sponge", "Towel", "Remote",
    "Painting", "Bottle", "Candle", "Cup", "Apple", "Bread", "Chair",
    "Box", "Statue", "Pan", "Watch",
)

# ray hit slots: nothing within range, obstacle (walls are obstacles), targets
SLOT_NONE = 0
SLOT_OBSTACLE = 1
TARGET_SLOT_OFFSET = 2


class SceneGenError(ValueError):
    """Raised when scene parameters cannot produce a valid scene."""


class UnreachableTargetError(RuntimeError):
    pass


class SceneFormatError(ValueError):
    pass


class CellKind(Enum):
    FREE = "free"
    OBSTACLE = "obstacle"
    TARGET = "target"


class Action(IntEnum):
    MOVE_AHEAD = 0
    ROTATE_LEFT = 1
    ROTATE_RIGHT = 2
    LOOK_UP = 3
    LOOK_DOWN = 4
    DONE = 5


N_ACTIONS = len(Action)
ACTION_NAMES = ("MoveAhead", "RotateLeft", "RotateRight", "LookUp", "LookDown", "Done")


@dataclass(frozen=True)
class AgentPose:
    x: int
    y: int
    heading: int = 0
    pitch: int = 0

    def __post_init__(self):
        if self.heading not in HEADING_VECTORS:
            raise ValueError(f"heading must be a multiple of 45 in [0, 360), got {self.heading}")
        if self.pitch not in PITCHES:
            raise ValueError(f"pitch must be one of {PITCHES}, got {self.pitch}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, self.heading, self.pitch)


@dataclass(frozen=True)
class StepOutcome:
    new_pose: AgentPose
    collided: bool = False
    action_failed: bool = False


@dataclass(frozen=True)
class SceneGenParams:
    width: int = 12
    height: int = 12
    density: float = 0.2
    n_classes: int = 3
    targets_per_class: int = 1
    cell_size: float = 0.25
    max_retries: int = 200
    class_names: tuple[str, ...] | None = None


@dataclass(frozen=True, eq=False)
class GridScene:
    id: str
    rows: tuple[str, ...]
    target_classes: tuple[str, ...]
    cell_size: float = 0.25
    _memo: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self.rows:
            raise SceneFormatError("scene has no rows")
        width = len(self.rows[0])
        if any(len(r) != width for r in self.rows):
            raise SceneFormatError("scene rows have unequal length")
        if len(self.target_classes) > 26:
            raise SceneFormatError("at most 26 target classes are supported")
        for r in self.rows:
            for ch in r:
                if ch in (FREE_CHAR, OBSTACLE_CHAR):
                    continue
                if not ("A" <= ch <= "Z") or ord(ch) - 65 >= len(self.target_classes):
                    raise SceneFormatError(f"invalid cell character {ch!r}")

    def __eq__(self, other):
        if not isinstance(other, GridScene):
            return NotImplemented
        return (self.id, self.rows, self.target_classes, self.cell_size) == (
            other.id, other.rows, other.target_classes, other.cell_size)

    def __hash__(self):
        return hash((self.id, self.rows, self.target_classes, self.cell_size))

    @property
    def width(self) -> int:
        return len(self.rows[0])

    @property
    def height(self) -> int:
        return len(self.rows)

    @property
    def n_classes(self) -> int:
        return len(self.target_classes)

    def cell(self, x: int, y: int) -> tuple[CellKind, int]:
        ch = self.rows[y][x]
        if ch == FREE_CHAR:
            return CellKind.FREE, -1
        if ch == OBSTACLE_CHAR:
            return CellKind.OBSTACLE, 0
        return CellKind.TARGET, ord(ch) - 65

    def in_bounds(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height

    def is_free(self, x: int, y: int) -> bool:
        return self.in_bounds(x, y) and self.rows[y][x] == FREE_CHAR

    def free_cells(self) -> list[tuple[int, int]]:
        if "free" not in self._memo:
            self._memo["free"] = [(x, y) for y, r in enumerate(self.rows)
                                  for x, ch in enumerate(r) if ch == FREE_CHAR]
        return self._memo["free"]

    def target_cells(self, goal: int) -> list[tuple[int, int]]:
        key = ("targets", goal)
        if key not in self._memo:
            ch = chr(65 + goal)
            self._memo[key] = [(x, y) for y, r in enumerate(self.rows)
                               for x, c in enumerate(r) if c == ch]
        return self._memo[key]

    def move_length(self, heading: int) -> float:
        """Distance covered by a successful MoveAhead at ``heading``."""
        return self.cell_size * (math.sqrt(2.0) if heading % 90 else 1.0)


# --------------------------------------------------------------------------
# scene files

def format_scene(scene: GridScene) -> str:
    lines = [f"{SCENE_HEADER} {scene.width} {scene.height} {scene.cell_size!r}"]
    lines.extend(scene.rows)
    lines.append("targets: " + " ".join(scene.target_classes))
    return "\n".join(lines) + "\n"


def parse_scene(text: str, scene_id: str = "scene", source: str = "<string>") -> GridScene:
    lines = text.splitlines()
    if not lines:
        raise SceneFormatError(f"{source}:1: empty scene file")
    head = lines[0].split()
    if len(head) != 5 or " ".join(head[:2]) != SCENE_HEADER:
        raise SceneFormatError(f"{source}:1: expected '{SCENE_HEADER} <width> <height> <cell_size>'")
    try:
        width, height, cell_size = int(head[2]), int(head[3]), float(head[4])
    except ValueError:
        raise SceneFormatError(f"{source}:1: malformed header values") from None
    if len(lines) != height + 2:
        raise SceneFormatError(f"{source}: expected {height} grid rows and a targets line")
    rows = tuple(lines[1:1 + height])
    for i, r in enumerate(rows):
        if len(r) != width:
            raise SceneFormatError(f"{source}:{i + 2}: row length {len(r)} != width {width}")
    tail = lines[-1]
    if not tail.startswith("targets:"):
        raise SceneFormatError(f"{source}:{len(lines)}: expected 'targets:' line")
    classes = tuple(tail[len("targets:"):].split())
    try:
        return GridScene(scene_id, rows, classes, cell_size)
    except SceneFormatError as exc:
        raise SceneFormatError(f"{source}: {exc}") from None


def save_scene(scene: GridScene, path) -> None:
    Path(path).write_text(format_scene(scene))


def load_scene(path) -> GridScene:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"scene file not found: {path}")
    return parse_scene(path.read_text(), scene_id=path.stem, source=str(path))


# --------------------------------------------------------------------------
# geometry

def supercover_line(x0: int, y0: int, x1: int, y1: int) -> list[tuple[int, int]]:
    """Every cell touched by the segment between two cell centres.

    At exact corner crossings both side cells are included along with the
    diagonal cell.  Integer arithmetic only.
    """
    dx, dy = x1 - x0, y1 - y0
    nx, ny = abs(dx), abs(dy)
    sx = 1 if dx > 0 else -1
    sy = 1 if dy > 0 else -1
    x, y = x0, y0
    cells = [(x, y)]
    ix = iy = 0
    while ix < nx or iy < ny:
        decision = (1 + 2 * ix) * ny - (1 + 2 * iy) * nx
        if decision == 0:
            cells.append((x + sx, y))
            cells.append((x, y + sy))
            x += sx
            y += sy
            ix += 1
            iy += 1
        elif decision < 0:
            x += sx
            ix += 1
        else:
            y += sy
            iy += 1
        cells.append((x, y))
    return cells


def line_of_sight(scene: GridScene, a: tuple[int, int], b: tuple[int, int]) -> bool:
    """True when no obstacle lies strictly between cells ``a`` and ``b``."""
    for x, y in supercover_line(a[0], a[1], b[0], b[1])[1:]:
        if (x, y) == b:
            continue
        if scene.rows[y][x] == OBSTACLE_CHAR:
            return False
    return True


def _in_view(hx: int, hy: int, dx: int, dy: int) -> bool:
    # angle between heading and offset <= FOV/2 (45 deg), exact in integers
    dot = hx * dx + hy * dy
    return dot > 0 and 2 * dot * dot >= (hx * hx + hy * hy) * (dx * dx + dy * dy)


def _check_goal(scene: GridScene, goal: int) -> None:
    if not isinstance(goal, (int, np.integer)) or not 0 <= goal < scene.n_classes:
        raise ValueError(f"unknown goal class {goal!r} for scene {scene.id}")


def is_visible(scene: GridScene, pose: AgentPose, goal: int) -> bool:
    _check_goal(scene, goal)
    hx, hy = HEADING_VECTORS[pose.heading]
    reach2 = (VISIBILITY_RANGE / scene.cell_size) ** 2 + 1e-9
    for tx, ty in scene.target_cells(goal):
        dx, dy = tx - pose.x, ty - pose.y
        if dx * dx + dy * dy > reach2 or not _in_view(hx, hy, dx, dy):
            continue
        if line_of_sight(scene, (pose.x, pose.y), (tx, ty)):
            return True
    return False


def visible_from_cell(scene: GridScene, x: int, y: int, goal: int) -> bool:
    """Goal visible from cell ``(x, y)`` under at least one heading."""
    return any(is_visible(scene, AgentPose(x, y, h), goal) for h in HEADINGS)


def step(scene: GridScene, pose: AgentPose, action: Action) -> StepOutcome:
    action = Action(action)
    if action is Action.MOVE_AHEAD:
        dx, dy = HEADING_VECTORS[pose.heading]
        nx, ny = pose.x + dx, pose.y + dy
        if not scene.is_free(nx, ny):
            return StepOutcome(pose, collided=True)
        return StepOutcome(replace(pose, x=nx, y=ny))
    if action is Action.ROTATE_LEFT:
        return StepOutcome(replace(pose, heading=(pose.heading + 45) % 360))
    if action is Action.ROTATE_RIGHT:
        return StepOutcome(replace(pose, heading=(pose.heading - 45) % 360))
    if action in (Action.LOOK_UP, Action.LOOK_DOWN):
        pitch = pose.pitch + (30 if action is Action.LOOK_UP else -30)
        if pitch not in PITCHES:
            return StepOutcome(pose, action_failed=True)
        return StepOutcome(replace(pose, pitch=pitch))
    return StepOutcome(pose)


def ahead_blocked(scene: GridScene, pose: AgentPose) -> bool:
    dx, dy = HEADING_VECTORS[pose.heading]
    return not scene.is_free(pose.x + dx, pose.y + dy)


# --------------------------------------------------------------------------
# shortest paths

_SQRT2 = math.sqrt(2.0)
_NEIGHBOURS = tuple(HEADING_VECTORS.values())


def _visibility_cells(scene: GridScene, goal: int) -> list[tuple[int, int]]:
    key = ("viscells", goal)
    if key not in scene._memo:
        scene._memo[key] = [c for c in scene.free_cells() if visible_from_cell(scene, c[0], c[1], goal)]
    return scene._memo[key]


def distance_field(scene: GridScene, goal: int) -> np.ndarray:
    """Path length in meters from every cell to the nearest goal-visibility cell.

    Non-free and unreachable cells hold ``inf``.  Path costs are tracked as
    (straight, diagonal) step counts so results are exact functions of them.
    """
    _check_goal(scene, goal)
    key = ("dist", goal)
    if key in scene._memo:
        return scene._memo[key]
    best: dict[tuple[int, int], tuple[int, int]] = {}
    heap = []
    for c in _visibility_cells(scene, goal):
        best[c] = (0, 0)
        heapq.heappush(heap, (0.0, 0, 0, c))
    while heap:
        cost, a, b, (x, y) = heapq.heappop(heap)
        if best.get((x, y)) != (a, b):
            continue
        for dx, dy in _NEIGHBOURS:
            nx, ny = x + dx, y + dy
            if not scene.is_free(nx, ny):
                continue
            na, nb = (a, b + 1) if dx and dy else (a + 1, b)
            nc = na + nb * _SQRT2
            old = best.get((nx, ny))
            if old is None or nc < old[0] + old[1] * _SQRT2:
                best[(nx, ny)] = (na, nb)
                heapq.heappush(heap, (nc, na, nb, (nx, ny)))
    out = np.full((scene.height, scene.width), np.inf)
    for (x, y), (a, b) in best.items():
        out[y, x] = (a + b * _SQRT2) * scene.cell_size
    scene._memo[key] = out
    return out


def shortest_path_length(scene: GridScene, start: AgentPose, goal: int) -> float:
    d = float(distance_field(scene, goal)[start.y, start.x])
    if math.isinf(d):
        raise UnreachableTargetError(
            f"unreachable target: class {goal} from ({start.x}, {start.y}) in scene {scene.id}")
    return d


# --------------------------------------------------------------------------
# observations

@dataclass(frozen=True)
class Observation:
    """Egocentric ray-cast features plus pitch, last action and goal encodings.

    ``vector`` layout: K rays x (distance, hit-slot one-hot), pitch one-hot(3),
    last-action one-hot(6), goal one-hot(G).  ``sensor`` is the prefix without
    the goal block.
    """

    vector: np.ndarray
    n_rays: int
    n_slots: int
    n_classes: int

    @property
    def ray_block(self) -> np.ndarray:
        return self.vector[: self.n_rays * (1 + self.n_slots)].reshape(self.n_rays, 1 + self.n_slots)

    @property
    def distances(self) -> np.ndarray:
        return self.ray_block[:, 0]

    @property
    def hit_slots(self) -> np.ndarray:
        return np.argmax(self.ray_block[:, 1:], axis=1)

    @property
    def sensor(self) -> np.ndarray:
        return self.vector[: len(self.vector) - self.n_classes]

    @property
    def pitch(self) -> np.ndarray:
        s = self.n_rays * (1 + self.n_slots)
        return self.vector[s:s + 3]

    @property
    def last_action(self) -> np.ndarray:
        s = self.n_rays * (1 + self.n_slots) + 3
        return self.vector[s:s + N_ACTIONS]

    @property
    def goal(self) -> np.ndarray:
        return self.vector[len(self.vector) - self.n_classes:]


def n_slots(n_classes: int) -> int:
    return TARGET_SLOT_OFFSET + n_classes


def sensor_size(n_classes: int, n_rays: int = N_RAYS) -> int:
    return n_rays * (1 + n_slots(n_classes)) + 3 + N_ACTIONS


def observation_size(n_classes: int, n_rays: int = N_RAYS) -> int:
    return sensor_size(n_classes, n_rays) + n_classes


def ray_angles(heading: int, n_rays: int = N_RAYS, fov: float = FIELD_OF_VIEW) -> np.ndarray:
    if n_rays == 1:
        return np.array([float(heading)])
    return heading + np.linspace(-fov / 2, fov / 2, n_rays)


def cast_ray(scene: GridScene, x: int, y: int, angle: float,
             max_range: float = RAY_MAX_RANGE) -> tuple[float, int]:
    """First non-free cell along a ray from the centre of ``(x, y)``.

    Returns (normalised distance, hit slot).  Distance is centre-to-centre;
    anything beyond ``max_range`` saturates to 1.0 with ``SLOT_NONE``.
    """
    rad = math.radians(angle)
    dx, dy = math.cos(rad), math.sin(rad)
    if abs(dx) < 1e-12:
        dx = 0.0
    if abs(dy) < 1e-12:
        dy = 0.0
    inf = math.inf
    sx = 1 if dx > 0 else -1
    sy = 1 if dy > 0 else -1
    tdx = abs(1.0 / dx) if dx else inf
    tdy = abs(1.0 / dy) if dy else inf
    # origin at the cell centre, half a cell from each boundary
    tmx = 0.5 * tdx
    tmy = 0.5 * tdy
    cx, cy = x, y
    limit = max_range / scene.cell_size
    while True:
        if abs(tmx - tmy) < 1e-9:
            t = tmx
            cx += sx
            cy += sy
            tmx += tdx
            tmy += tdy
        elif tmx < tmy:
            t = tmx
            cx += sx
            tmx += tdx
        else:
            t = tmy
            cy += sy
            tmy += tdy
        if t > limit or not scene.in_bounds(cx, cy):
            return 1.0, SLOT_NONE
        ch = scene.rows[cy][cx]
        if ch == FREE_CHAR:
            continue
        dist = math.hypot(cx - x, cy - y) * scene.cell_size
        if dist > max_range:
            return 1.0, SLOT_NONE
        slot = SLOT_OBSTACLE if ch == OBSTACLE_CHAR else TARGET_SLOT_OFFSET + ord(ch) - 65
        return dist / max_range, slot


def cast_rays(scene: GridScene, pose: AgentPose, n_rays: int = N_RAYS,
              max_range: float = RAY_MAX_RANGE) -> tuple[np.ndarray, np.ndarray]:
    hits = [cast_ray(scene, pose.x, pose.y, a, max_range) for a in ray_angles(pose.heading, n_rays)]
    return (np.array([h[0] for h in hits], dtype=np.float32),
            np.array([h[1] for h in hits], dtype=np.int64))


def _ray_features(scene: GridScene, x: int, y: int, heading: int) -> np.ndarray:
    key = ("rays", x, y, heading)
    block = scene._memo.get(key)
    if block is None:
        dist, slots = cast_rays(scene, AgentPose(x, y, heading))
        block = np.zeros((N_RAYS, 1 + n_slots(scene.n_classes)), dtype=np.float32)
        block[:, 0] = dist
        block[np.arange(N_RAYS), 1 + slots] = 1.0
        block = block.ravel()
        scene._memo[key] = block
    return block


def observe(scene: GridScene, pose: AgentPose, last_action: Action, goal: int,
            noise_rng: np.random.Generator | None = None,
            sigma: float = DEFAULT_NOISE_SIGMA) -> Observation:
    """Noisy egocentric observation.  ``noise_rng=None`` or ``sigma=0`` is noise-free."""
    rays = _ray_features(scene, pose.x, pose.y, pose.heading)
    n_cls = scene.n_classes
    width = 1 + n_slots(n_cls)
    nr = len(rays)
    vec = np.zeros(nr + 3 + N_ACTIONS + n_cls, dtype=np.float32)
    vec[:nr] = rays
    if noise_rng is not None and sigma > 0:
        d = vec[0:nr:width]
        d += noise_rng.normal(0.0, sigma, N_RAYS).astype(np.float32)
        np.clip(d, 0.0, 1.0, out=d)
    vec[nr + PITCHES.index(pose.pitch)] = 1.0
    vec[nr + 3 + int(last_action)] = 1.0
    vec[nr + 3 + N_ACTIONS + goal] = 1.0
    return Observation(vec, N_RAYS, n_slots(n_cls), n_cls)


# --------------------------------------------------------------------------
# generation

def _connected(scene: GridScene) -> bool:
    free = scene.free_cells()
    if not free:
        return False
    seen = {free[0]}
    stack = [free[0]]
    while stack:
        x, y = stack.pop()
        for dx, dy in _NEIGHBOURS:
            n = (x + dx, y + dy)
            if n not in seen and scene.is_free(*n):
                seen.add(n)
                stack.append(n)
    return len(seen) == len(free)


def audit_scene(scene: GridScene) -> list[str]:
    """Invariant violations of ``scene``; empty when valid."""
    problems = []
    w, h = scene.width, scene.height
    for x in range(w):
        for y in (0, h - 1):
            if scene.rows[y][x] != OBSTACLE_CHAR:
                problems.append(f"boundary cell ({x}, {y}) is not an obstacle")
    for y in range(h):
        for x in (0, w - 1):
            if scene.rows[y][x] != OBSTACLE_CHAR:
                problems.append(f"boundary cell ({x}, {y}) is not an obstacle")
    for g in range(scene.n_classes):
        cells = scene.target_cells(g)
        if not cells:
            problems.append(f"target class {g} has no cell")
        for t in cells:
            if not any(
                math.hypot(fx - t[0], fy - t[1]) * scene.cell_size <= VISIBILITY_RANGE + 1e-9
                and line_of_sight(scene, (fx, fy), t)
                for fx, fy in scene.free_cells()
            ):
                problems.append(f"target cell {t} is not visible from any free cell")
    if not _connected(scene):
        problems.append("free cells are not 8-connected")
    return problems


def generate_scene(seed: int, params: SceneGenParams = SceneGenParams(),
                   scene_id: str | None = None) -> GridScene:
    p = params
    if p.width < 8 or p.height < 8:
        raise SceneGenError("unsatisfiable scene params: grid must be at least 8x8")
    if not 1 <= p.n_classes <= 26:
        raise SceneGenError("unsatisfiable scene params: need 1..26 target classes")
    if p.targets_per_class < 1:
        raise SceneGenError("unsatisfiable scene params: targets_per_class must be >= 1")
    if not 0.0 <= p.density <= 0.4:
        raise SceneGenError(f"unsatisfiable scene params: density {p.density} outside [0, 0.4]")
    names = tuple(p.class_names) if p.class_names else DEFAULT_CLASS_NAMES[: p.n_classes]
    if len(names) != p.n_classes:
        raise SceneGenError("unsatisfiable scene params: class_names length != n_classes")
    interior = [(x, y) for y in range(1, p.height - 1) for x in range(1, p.width - 1)]
    n_obst = int(round(p.density * len(interior)))
    n_targets = p.n_classes * p.targets_per_class
    if n_obst + n_targets + 2 > len(interior):
        raise SceneGenError("unsatisfiable scene params: too few interior cells")
    rng = np.random.default_rng(seed)
    sid = scene_id if scene_id is not None else f"scene_{seed}"
    for _ in range(p.max_retries):
        grid = [[OBSTACLE_CHAR] * p.width for _ in range(p.height)]
        for x, y in interior:
            grid[y][x] = FREE_CHAR
        order = rng.permutation(len(interior))
        picks = [interior[i] for i in order[: n_obst + n_targets]]
        for k, (x, y) in enumerate(picks[:n_targets]):
            grid[y][x] = chr(65 + k // p.targets_per_class)
        for x, y in picks[n_targets:]:
            grid[y][x] = OBSTACLE_CHAR
        scene = GridScene(sid, tuple("".join(r) for r in grid), names, p.cell_size)
        if not audit_scene(scene):
            return scene
    raise SceneGenError(
        f"unsatisfiable scene params: no valid scene after {p.max_retries} attempts")


def render_ascii(scene: GridScene, pose: AgentPose | None = None,
                 marks: dict[tuple[int, int], str] | None = None) -> str:
    grid = [list(r) for r in scene.rows]
    for (x, y), ch in (marks or {}).items():
        grid[y][x] = ch
    if pose is not None:
        grid[pose.y][pose.x] = "@"
    return "\n".join("".join(r) for r in grid)
