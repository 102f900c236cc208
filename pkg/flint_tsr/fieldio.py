"""Ensemble data model, the FLG1 raw format, and the synthetic blob ensemble.

Grids are stored as ``(y, x)`` or ``(z, y, x)`` arrays. Flow component ``c`` runs along x, y, z for ``c = 0, 1, 2``
and a FlowGrid keeps its components stacked as ``(rank, *dims)``. Flow units are cells per timestep.

FLG1 layout (little endian): magic ``b"FLG1"``, u8 rank, u8 component count, one u32 extent per axis, then float32
values in component-major, row-major spatial order.
"""

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Sequence

import numpy as np

from flint_tsr.motion import Motion, make_motion
from flint_tsr.struct import ConfigStruct
from flint_tsr.types import Array, Boolean, Float, Int

logger = logging.getLogger(__name__)

# allow magic value comparison
# ruff: noqa: PLR2004

MAGIC = b"FLG1"
_U32_MAX = 2**32 - 1
RAW_TAG = "raw"
UNIT_TAG = "unit"


class FormatError(ValueError):
    """A payload that is not a valid FLG1 record."""


@dataclass
class Grid:
    """Dense scalar field on a regular 2D/3D lattice."""

    values: np.ndarray
    tag: str = RAW_TAG

    def __post_init__(self):
        """Check rank and, for unit-normalized grids, the value range."""
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim not in (2, 3) or min(self.values.shape) < 1:
            raise ValueError(f"a grid needs 2 or 3 positive extents, got shape {self.values.shape}")
        if self.tag not in (RAW_TAG, UNIT_TAG):
            raise ValueError(f"unknown value range tag {self.tag!r}")
        if self.tag == UNIT_TAG and (self.values.min() < 0.0 or self.values.max() > 1.0):
            raise ValueError("unit-normalized grid has values outside [0, 1]")

    @property
    def dims(self) -> tuple:
        """Spatial extents."""
        return self.values.shape

    @property
    def rank(self) -> int:
        """Number of spatial axes."""
        return self.values.ndim


@dataclass
class FlowGrid:
    """Dense vector field, one displacement per cell, components stacked first."""

    components: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        """Check that there is one component per spatial axis."""
        self.components = np.asarray(self.components, dtype=np.float64)
        rank = self.components.ndim - 1
        if rank not in (2, 3) or self.components.shape[0] != rank:
            raise ValueError(f"a flow grid needs one component per spatial axis, got shape {self.components.shape}")
        if self.normalized and np.abs(self.components).max(initial=0.0) > 1.0:
            raise ValueError("normalized flow has components outside [-1, 1]")

    @property
    def dims(self) -> tuple:
        """Spatial extents."""
        return self.components.shape[1:]

    @property
    def rank(self) -> int:
        """Number of spatial axes."""
        return self.components.shape[0]


@dataclass
class Member:
    """One simulation run: its parameter vector, timesteps and optional ground-truth flows."""

    sim_params: np.ndarray
    timesteps: List[Grid]
    flows: List[FlowGrid] | None = None

    def __post_init__(self):
        """Check that grids share dims and flows align one-to-one with timesteps."""
        self.sim_params = np.asarray(self.sim_params, dtype=np.float64).reshape(-1)
        if not self.timesteps:
            raise ValueError("a member needs at least one timestep")
        dims = self.timesteps[0].dims
        for k, grid in enumerate(self.timesteps):
            if grid.dims != dims:
                raise ValueError(f"timestep {k} has dims {grid.dims}, expected {dims}")
        if self.flows is not None:
            if len(self.flows) != len(self.timesteps):
                raise ValueError(f"{len(self.flows)} flows for {len(self.timesteps)} timesteps")
            for k, flow in enumerate(self.flows):
                if flow.dims != dims:
                    raise ValueError(f"flow {k} has dims {flow.dims}, expected {dims}")

    @property
    def dims(self) -> tuple:
        """Spatial extents shared by every timestep."""
        return self.timesteps[0].dims

    def flattened(self) -> np.ndarray:
        """All timesteps of the member as one vector."""
        return np.concatenate([g.values.reshape(-1) for g in self.timesteps])


@dataclass
class EnsembleSet:
    """Ordered members of a parameterized family of runs."""

    members: List[Member] = field(default_factory=list)

    @property
    def dims(self) -> tuple:
        """Spatial extents of the first member."""
        return self.members[0].dims

    @property
    def rank(self) -> int:
        """Number of spatial axes."""
        return len(self.dims)

    @property
    def param_dim(self) -> int:
        """Length of the simulation parameter vectors."""
        return self.members[0].sim_params.size

    def param_matrix(self) -> np.ndarray:
        """Simulation parameters stacked one member per row."""
        return np.stack([m.sim_params for m in self.members])

    def class_labels(self) -> np.ndarray:
        """Class id per member: members sharing a parameter vector share a class, numbered by first appearance."""
        seen = {}
        labels = []
        for m in self.members:
            key = tuple(np.round(m.sim_params, 12))
            labels.append(seen.setdefault(key, len(seen)))
        return np.array(labels, dtype=int)

    def subset(self, indices: Sequence[int]) -> "EnsembleSet":
        """Members at the given positions, in that order."""
        return EnsembleSet([self.members[i] for i in indices])


def encode_raw(values: np.ndarray, components: int = 1) -> bytes:
    """Encode an array whose leading axis holds ``components`` (omitted when 1) as one FLG1 record."""
    values = np.asarray(values)
    spatial = values.shape[1:] if components > 1 else values.shape
    if components > 1 and values.shape[0] != components:
        raise ValueError(f"expected {components} components on axis 0, got {values.shape[0]}")
    if not 1 <= len(spatial) <= 255 or not 1 <= components <= 255:
        raise ValueError(f"rank {len(spatial)} / component count {components} do not fit the header")
    for axis, extent in enumerate(spatial):
        if not 1 <= extent <= _U32_MAX:
            raise ValueError(f"extent {extent} on axis {axis} does not fit in u32")
    header = MAGIC + struct.pack("<BB", len(spatial), components) + struct.pack(f"<{len(spatial)}I", *spatial)
    return header + np.ascontiguousarray(values, dtype="<f4").tobytes()


def decode_raw(payload: bytes, offset: int = 0) -> tuple:
    """Decode one FLG1 record starting at ``offset``.

    Returns:
        tuple: ``(values, components, end_offset)``; values carry the components on axis 0 when there are several.
    """
    if payload[offset : offset + 4] != MAGIC:
        raise FormatError(f"bad magic {payload[offset:offset + 4]!r}, expected {MAGIC!r}")
    if len(payload) < offset + 6:
        raise FormatError("truncated header")
    rank, components = struct.unpack_from("<BB", payload, offset + 4)
    if rank == 0 or components == 0:
        raise FormatError("rank and component count must be positive")
    start = offset + 6 + 4 * rank
    if len(payload) < start:
        raise FormatError("truncated extents")
    extents = struct.unpack_from(f"<{rank}I", payload, offset + 6)
    count = components * math.prod(extents)
    if count == 0:
        raise FormatError("zero extent in header")
    if count > (len(payload) - start) // 4 + 1:
        raise FormatError(f"extents {extents} overflow the payload")
    end = start + 4 * count
    if len(payload) < end:
        raise FormatError(f"truncated payload: need {end - offset} bytes, have {len(payload) - offset}")
    values = np.frombuffer(payload, dtype="<f4", count=count, offset=start).astype(np.float64)
    shape = ((components,) if components > 1 else ()) + tuple(extents)
    return values.reshape(shape), components, end


def write_raw(grid_or_flow: Grid | FlowGrid, path: str | Path) -> None:
    """Write a Grid or FlowGrid as an FLG1 file."""
    if isinstance(grid_or_flow, FlowGrid):
        payload = encode_raw(grid_or_flow.components, components=grid_or_flow.rank)
    elif isinstance(grid_or_flow, Grid):
        payload = encode_raw(grid_or_flow.values)
    else:
        raise TypeError(f"cannot write {type(grid_or_flow).__name__} as FLG1")
    Path(path).write_bytes(payload)


def read_raw(path: str | Path) -> Grid | FlowGrid:
    """Read an FLG1 file back into a Grid (one component) or a FlowGrid (one component per axis)."""
    payload = Path(path).read_bytes()
    values, components, end = decode_raw(payload)
    if end != len(payload):
        raise FormatError(f"{len(payload) - end} trailing bytes after the record")
    if components == 1:
        tag = UNIT_TAG if values.size and values.min() >= 0.0 and values.max() <= 1.0 else RAW_TAG
        return Grid(values, tag=tag)
    return FlowGrid(values)


class Normalized(NamedTuple):
    """A normalized grid plus the affine map that inverts it: ``raw = value * scale + offset``."""

    grid: Grid | FlowGrid
    offset: float
    scale: float


def normalize(grid: Grid) -> Normalized:
    """Affinely map a grid to [0, 1]. A constant grid maps to all zeros with scale 1."""
    lo, hi = float(grid.values.min()), float(grid.values.max())
    if hi <= lo:
        return Normalized(Grid(np.zeros_like(grid.values), tag=UNIT_TAG), lo, 1.0)
    if grid.tag == UNIT_TAG and lo == 0.0 and hi == 1.0:
        return Normalized(Grid(grid.values.copy(), tag=UNIT_TAG), 0.0, 1.0)
    values = np.clip((grid.values - lo) / (hi - lo), 0.0, 1.0)
    return Normalized(Grid(values, tag=UNIT_TAG), lo, hi - lo)


def normalize_flow(flow: FlowGrid, scale: float | None = None) -> Normalized:
    """Divide a flow by its largest absolute component (or a given scale) so it lands in [-1, 1]."""
    if scale is None:
        scale = float(np.abs(flow.components).max(initial=0.0))
    if scale <= 0.0:
        scale = 1.0
    return Normalized(FlowGrid(flow.components / scale, normalized=True), 0.0, scale)


def normalize_ensemble(ensemble: EnsembleSet) -> Normalized:
    """Map every grid of the ensemble to [0, 1] with one dataset-wide range, keeping flows as they are."""
    lo = min(float(g.values.min()) for m in ensemble.members for g in m.timesteps)
    hi = max(float(g.values.max()) for m in ensemble.members for g in m.timesteps)
    scale = hi - lo if hi > lo else 1.0
    members = [
        Member(
            m.sim_params,
            [Grid(np.clip((g.values - lo) / scale, 0.0, 1.0), tag=UNIT_TAG) for g in m.timesteps],
            m.flows,
        )
        for m in ensemble.members
    ]
    logger.info("normalized %d members with range [%.4g, %.4g]", len(members), lo, hi)
    return Normalized(EnsembleSet(members), lo, scale)


def flow_scale(ensemble: EnsembleSet) -> float:
    """Largest absolute ground-truth flow component over the whole ensemble; 1 when there is no nonzero flow.

    Training divides target and predicted flows by this one scale, so every member's flows land in [-1, 1] and
    keep their relative magnitudes.
    """
    peaks = [float(np.abs(f.components).max()) for m in ensemble.members if m.flows is not None for f in m.flows]
    peak = max(peaks, default=0.0)
    return peak if peak > 0.0 else 1.0


class SynthConfig(ConfigStruct):
    """Synthetic ensemble of advected Gaussian blobs. Motion arrays are cycled over the members."""

    dims = Array(Int(low=16), default=[32, 32])
    n_timesteps = Int(low=1, default=200)
    n_members = Int(low=1, default=4)
    n_blobs = Int(low=1, default=6)
    speeds = Array(Float(low=0.0), default=[0.5])
    direction = Array(Float(), default=[1.0, 0.0])
    rotations = Array(Float(), default=[0.0])
    blob_width = Float(low=0.0, default=0.0)
    noise = Float(low=0.0, default=0.0)
    shared_blobs = Boolean(default=True)
    seed = Int(default=0)

    def check(self) -> None:
        """Rank must be 2 or 3 and the direction must match it."""
        if len(self.dims) not in (2, 3):
            raise ValueError(f"dims must have 2 or 3 entries, got {len(self.dims)}")
        if len(self.direction) > len(self.dims) or not any(self.direction):
            raise ValueError("direction must be a nonzero vector with at most one entry per axis")
        if not self.speeds or not self.rotations:
            raise ValueError("speeds and rotations need at least one entry")

    def motions(self) -> List[Motion]:
        """Per-member motions built from the cycled speed and rotation arrays."""
        unit = np.asarray(self.direction, dtype=np.float64)
        unit = unit / np.linalg.norm(unit)
        motions = []
        for m in range(self.n_members):
            speed = self.speeds[m % len(self.speeds)]
            rotation = self.rotations[m % len(self.rotations)]
            motions.append(make_motion(velocity=list(unit * speed), rotation=rotation))
        return motions


@dataclass
class Blobs:
    """Initial blob layout: centers in (x, y[, z]) cell coordinates, amplitudes and widths."""

    centers: np.ndarray
    amplitudes: np.ndarray
    widths: np.ndarray


def make_blobs(cfg: SynthConfig, rng: np.random.Generator) -> Blobs:
    """Draw a random blob layout inside the domain."""
    extents = np.asarray(cfg.dims[::-1], dtype=np.float64)
    width = cfg.blob_width or float(extents.min()) / 10.0
    return Blobs(
        centers=rng.uniform(0.0, 1.0, size=(cfg.n_blobs, len(extents))) * extents,
        amplitudes=rng.uniform(0.5, 1.0, size=cfg.n_blobs),
        widths=rng.uniform(0.75, 1.25, size=cfg.n_blobs) * width,
    )


def domain_center(dims: Sequence[int]) -> np.ndarray:
    """Center of the lattice in (x, y[, z]) cell coordinates."""
    return (np.asarray(dims[::-1], dtype=np.float64) - 1.0) / 2.0


def _rotate_xy(points: np.ndarray, angle: float) -> np.ndarray:
    out = points.copy()
    c, s = np.cos(angle), np.sin(angle)
    out[..., 0] = c * points[..., 0] - s * points[..., 1]
    out[..., 1] = s * points[..., 0] + c * points[..., 1]
    return out


def blob_centers(blobs: Blobs, motion: Motion, step: float, dims: Sequence[int]) -> np.ndarray:
    """Blob centers after ``step`` timesteps: rotation about the domain centre, then translation."""
    rank = len(dims)
    center = domain_center(dims)
    rotated = _rotate_xy(blobs.centers - center, motion.rotation_rate() * step) + center
    return rotated + motion.velocity_vector(rank) * step


def cell_coordinates(dims: Sequence[int]) -> np.ndarray:
    """Cell positions as ``(rank, *dims)`` with component 0 along x."""
    grids = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")
    return np.stack(grids[::-1])


def render_blobs(blobs: Blobs, centers: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """Evaluate the blob sum at every cell with periodic (minimum image) distances."""
    coords = cell_coordinates(dims)
    extents = np.asarray(dims[::-1], dtype=np.float64).reshape((-1,) + (1,) * len(dims))
    field_ = np.zeros(tuple(dims))
    for c, a, w in zip(centers, blobs.amplitudes, blobs.widths):
        d = coords - c.reshape((-1,) + (1,) * len(dims))
        d = (d + extents / 2.0) % extents - extents / 2.0
        field_ += a * np.exp(-np.sum(d * d, axis=0) / (2.0 * w * w))
    return field_


def analytic_flow(motion: Motion, step: float, dims: Sequence[int]) -> np.ndarray:
    """Exact velocity at every cell for frame ``step``: ``v + w * (-(p_y - c_y), p_x - c_x)``."""
    rank = len(dims)
    coords = cell_coordinates(dims)
    velocity = motion.velocity_vector(rank)
    center = domain_center(dims) + velocity * step
    arm = coords - center.reshape((-1,) + (1,) * rank)
    flow = np.broadcast_to(velocity.reshape((-1,) + (1,) * rank), coords.shape).copy()
    omega = motion.rotation_rate()
    flow[0] += -omega * arm[1]
    flow[1] += omega * arm[0]
    return flow


def check_motion(motion: Motion, dims: Sequence[int]) -> None:
    """Reject motions that move structures more than a quarter extent per step."""
    rank = len(dims)
    extents = np.asarray(dims[::-1], dtype=np.float64)
    velocity = motion.velocity_vector(rank)
    for axis, (v, n) in enumerate(zip(velocity, extents)):
        if abs(v) > 0.25 * n:
            raise ValueError(f"velocity {v} on component {axis} exceeds 0.25 * extent {n} (would alias)")
    radius = float(np.linalg.norm((extents[:2] - 1.0) / 2.0))
    if abs(motion.rotation_rate()) * radius > 0.25 * float(extents[:2].min()):
        raise ValueError(f"rotation rate {motion.rotation_rate()} moves the domain corners too far (would alias)")


def synth_member(cfg: SynthConfig, motion: Motion, blobs: Blobs, rng: np.random.Generator) -> Member:
    """Render one member: analytic frames, exact flows, noise on the scalar fields only."""
    dims = tuple(cfg.dims)
    check_motion(motion, dims)
    grids, flows = [], []
    for k in range(cfg.n_timesteps):
        values = render_blobs(blobs, blob_centers(blobs, motion, k, dims), dims)
        if cfg.noise > 0.0:
            values = values + rng.normal(0.0, cfg.noise, size=values.shape)
        grids.append(Grid(values))
        flows.append(FlowGrid(analytic_flow(motion, k, dims)))
    return Member(motion.sim_params(), grids, flows)


def synth_ensemble(cfg: SynthConfig, motions: Sequence[Motion] | None = None) -> EnsembleSet:
    """Generate an ensemble of Gaussian blobs advected by closed-form flows.

    Args:
        cfg (SynthConfig): Extents, lengths, blob count, noise and seed.
        motions (Sequence[Motion], optional): One motion per member. Built from the config arrays when omitted.

    Returns:
        EnsembleSet: Raw (unnormalized) grids with exact analytic flows.
    """
    motions = list(motions) if motions is not None else cfg.motions()
    if len(motions) != cfg.n_members:
        raise ValueError(f"{len(motions)} motions for {cfg.n_members} members")
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(cfg.n_members + 1)]
    shared = make_blobs(cfg, streams[-1])
    members = []
    for m, motion in enumerate(motions):
        blobs = shared if cfg.shared_blobs else make_blobs(cfg, streams[m])
        members.append(synth_member(cfg, motion, blobs, streams[m]))
        logger.debug("member %d: params %s", m, members[-1].sim_params)
    logger.info("synthesized %d members x %d timesteps at %s", cfg.n_members, cfg.n_timesteps, tuple(cfg.dims))
    return EnsembleSet(members)


def write_ensemble(ensemble: EnsembleSet, out_dir: str | Path) -> Path:
    """Write every grid and flow as FLG1 files plus a comma-separated manifest; returns the manifest path.

    Manifest lines are ``p1,...,pn,grid paths...[,flow paths...]`` relative to the manifest, after a header
    comment that records the parameter count, timestep count and whether flows follow.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_steps = len(ensemble.members[0].timesteps)
    has_flows = all(m.flows is not None for m in ensemble.members)
    lines = [f"# n_params={ensemble.param_dim} n_timesteps={n_steps} flows={int(has_flows)}"]
    for m, member in enumerate(ensemble.members):
        if len(member.timesteps) != n_steps:
            raise ValueError(f"member {m} has {len(member.timesteps)} timesteps, expected {n_steps}")
        member_dir = out_dir / f"member_{m:03d}"
        member_dir.mkdir(exist_ok=True)
        paths = []
        for k, grid in enumerate(member.timesteps):
            write_raw(grid, member_dir / f"grid_{k:04d}.flg")
            paths.append(f"member_{m:03d}/grid_{k:04d}.flg")
        if has_flows:
            for k, flow in enumerate(member.flows):
                write_raw(flow, member_dir / f"flow_{k:04d}.flg")
                paths.append(f"member_{m:03d}/flow_{k:04d}.flg")
        lines.append(",".join([repr(float(p)) for p in member.sim_params] + paths))
    manifest = out_dir / "manifest.csv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info("wrote %d members to %s", len(ensemble.members), manifest)
    return manifest


def read_ensemble(manifest: str | Path) -> EnsembleSet:
    """Read an ensemble back from its manifest."""
    manifest = Path(manifest)
    lines = [line.strip() for line in manifest.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not lines or not lines[0].startswith("#"):
        raise ValueError(f"{manifest}: missing manifest header")
    header = dict(item.split("=", 1) for item in lines[0].lstrip("#").split())
    try:
        n_params, n_steps, has_flows = int(header["n_params"]), int(header["n_timesteps"]), header["flows"] == "1"
    except KeyError as exc:
        raise ValueError(f"{manifest}: header lacks {exc}") from exc
    members = []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        expected = n_params + n_steps * (2 if has_flows else 1)
        if len(fields) != expected:
            raise ValueError(f"{manifest}:{lineno}: expected {expected} fields, got {len(fields)}")
        params = [float(v) for v in fields[:n_params]]
        paths = [manifest.parent / p for p in fields[n_params:]]
        grids = [read_raw(p) for p in paths[:n_steps]]
        flows = [read_raw(p) for p in paths[n_steps:]] if has_flows else None
        members.append(Member(params, grids, flows))
    return EnsembleSet(members)


def write_pgm(grid: Grid, path: str | Path) -> None:
    """Export a grid as a portable graymap (binary P5, ASCII header); 3D grids export their middle z slice."""
    values = grid.values if grid.rank == 2 else grid.values[grid.dims[0] // 2]
    lo, hi = float(values.min()), float(values.max())
    scaled = np.zeros_like(values) if hi <= lo else (values - lo) / (hi - lo)
    pixels = np.round(scaled * 255.0).astype(np.uint8)
    height, width = pixels.shape
    Path(path).write_bytes(f"P5\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes())
