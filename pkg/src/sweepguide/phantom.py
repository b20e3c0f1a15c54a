"""Synthetic prostate phantoms and angle-parameterized sweep rendering.

A phantom is an ellipsoid (the prostate analogue) placed at distance ``d``
in front of a pivot, plus a small set of parametric bright features (a
bulb-and-duct analogue below the gland, a vesicle analogue above it) that
are only visible near the centre plane.  Scan planes rotate about the
pivot through the configured arc; right-to-left means increasing sweep
angle.  A plane at sweep angle ``phi`` sits at perpendicular offset
``d*sin(phi - theta_c)`` from the ellipsoid centre, so the cross-section
is widest exactly at ``theta_c`` and vanishes where the plane misses the
gland entirely.

All randomness is derived from explicit seeds: the same (seed, config)
always reproduces the same phantom, and rendering is a pure function of
(phantom, angle).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

__all__ = [
    "Pose",
    "PhantomConfig",
    "Phantom",
    "Frame",
    "ObserverVotes",
    "SweepVolume",
    "generate_phantom",
    "cross_section",
    "render_bscan",
    "ground_truth_position",
    "ground_truth_direction",
    "generate_sweep",
    "simulate_observer",
    "attach_observers",
]

POSITION_CLASSES = ("O", "P", "C")
DIRECTION_CLASSES = ("R", "S", "L")

_BG_MEAN = 0.32            # speckle background mean intensity
_INTERIOR_GAIN = 0.40      # hypoechoic interior multiplier
_SPECKLE_SMOOTH = 0.8      # gaussian sigma (px) applied to the raw Rayleigh field


@dataclass(frozen=True)
class Pose:
    """Probe position (mm) and orientation (degrees); theta_y is the sweep axis."""

    x: float
    y: float
    z: float
    theta_x: float
    theta_y: float
    theta_z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z,
                         self.theta_x, self.theta_y, self.theta_z])


@dataclass
class PhantomConfig:
    """Geometry, imaging and labelling parameters for one phantom volume.

    ``theta_c`` may be left as None, in which case it is drawn uniformly
    within +/-12 degrees of the arc midpoint from ``seed``.
    """

    a: float = 9.0            # lateral semi-axis (out of plane at theta_c), mm
    b: float = 10.0           # depth semi-axis, mm
    c: float = 11.0           # in-plane horizontal semi-axis, mm
    d: float = 30.0           # pivot-to-centre distance, mm
    theta_c: float | None = None
    delta_c: float = 3.0      # centre-band half width, degrees
    quality: int = 3
    arc: float = 60.0
    frames_per_sweep: int = 150
    height: int = 96
    width: int = 96
    pixel_size: float = 0.5
    seed: int = 0
    frames_override: bool = False   # allow frame counts outside 134..164

    THETA_C_SPREAD = 12.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if min(self.a, self.b, self.c) <= 0:
            raise ValueError("semi-axes must be positive")
        if self.d <= max(self.a, self.b, self.c):
            raise ValueError(
                f"pivot distance d={self.d} must exceed the largest semi-axis "
                f"{max(self.a, self.b, self.c)} (prostate fully in front of pivot)")
        if not (0 <= self.quality <= 3):
            raise ValueError("quality must be an integer 0..3")
        if self.arc <= 0:
            raise ValueError("arc must be positive")
        if not self.frames_override and not (134 <= self.frames_per_sweep <= 164):
            raise ValueError(
                f"frames_per_sweep {self.frames_per_sweep} outside 134..164 "
                "(set frames_override for desk-scale sweeps)")
        if not (0.05 <= self.pixel_size <= 2.0):
            raise ValueError("pixel_size out of plausible range")
        if self.theta_c is not None:
            mid = self.arc / 2.0
            if abs(self.theta_c - mid) > self.THETA_C_SPREAD:
                raise ValueError(
                    f"theta_c {self.theta_c} outside midpoint +/-{self.THETA_C_SPREAD}")


@dataclass
class Phantom:
    """Realized geometry plus feature placement and texture seed."""

    config: PhantomConfig
    theta_c: float
    extent_deg: float          # half-extent of the P band (plane still cuts gland)
    bulb_offset: tuple         # (depth_mm from gland centre, lateral_mm)
    bulb_sigma: float
    vesicle_offset: tuple
    vesicle_sigma: float
    texture_seed: int

    @property
    def quality(self) -> int:
        return self.config.quality

    @property
    def arc(self) -> float:
        return self.config.arc


@dataclass
class Frame:
    """One rendered B-scan-like image with its recorded probe pose."""

    image: np.ndarray          # H x W float32 in [0, 1]
    pose: Pose
    sweep_angle: float


@dataclass
class ObserverVotes:
    """Per-frame labels from one simulated observer.

    The observer applies the ground-truth rules with the centre angle and
    the gland extent each shifted by a per-volume normal draw; the shifts
    are kept for auditability.
    """

    position: list
    direction: list
    centre_shift_deg: float
    extent_shift_deg: float

    @property
    def centre_deg(self) -> float:
        return self.centre_shift_deg  # shift relative to true centre


@dataclass
class SweepVolume:
    """Right-to-left ordered frame stack with labels and observer votes."""

    images: np.ndarray         # [F, H, W] float32
    poses: np.ndarray          # [F, 6] float32
    angles: np.ndarray         # [F] float64, strictly increasing
    gt_position: list
    gt_direction: list
    quality: int
    phantom_id: str
    patient_id: str = "p000"
    volume_id: str = "v000"
    theta_c: float = 0.0
    arc: float = 60.0
    pixel_size: float = 0.5
    delta_c: float = 3.0
    observers: list = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return int(self.images.shape[0])

    def frame(self, i: int) -> Frame:
        p = self.poses[i]
        return Frame(image=self.images[i],
                     pose=Pose(*(float(v) for v in p)),
                     sweep_angle=float(self.angles[i]))


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def _support_mm(phantom: Phantom, delta_rad: float) -> float:
    """Ellipsoid support length along the plane normal at offset angle delta."""
    a, b = phantom.config.a, phantom.config.b
    return math.sqrt((a * math.cos(delta_rad)) ** 2 + (b * math.sin(delta_rad)) ** 2)


def _solve_extent_deg(config: PhantomConfig) -> float:
    """Half-angle at which the plane stops cutting the ellipsoid.

    Solves d*sin(delta) = sqrt(a^2 cos^2 + b^2 sin^2) by bisection; the
    left side grows monotonically faster, so the root is unique in (0, 90].
    """
    a, b, d = config.a, config.b, config.d

    def gap(delta_rad):
        return d * math.sin(delta_rad) - math.sqrt(
            (a * math.cos(delta_rad)) ** 2 + (b * math.sin(delta_rad)) ** 2)

    lo, hi = 0.0, math.pi / 2
    if gap(hi) <= 0:   # cannot happen while d > max semi-axis, kept as a guard
        return 90.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if gap(mid) > 0:
            hi = mid
        else:
            lo = mid
    return math.degrees(0.5 * (lo + hi))


def generate_phantom(config: PhantomConfig) -> Phantom:
    """Realize a phantom from its config; deterministic in (seed, config)."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0x5EED)))
    mid = config.arc / 2.0
    if config.theta_c is None:
        theta_c = float(rng.uniform(mid - PhantomConfig.THETA_C_SPREAD,
                                    mid + PhantomConfig.THETA_C_SPREAD))
    else:
        theta_c = float(config.theta_c)
        rng.uniform(0, 1)  # keep the draw count stable either way
    extent = _solve_extent_deg(config)
    # feature placement varies a little between phantoms
    bulb_offset = (-config.b - rng.uniform(3.0, 5.0), -rng.uniform(2.0, 4.0))
    vesicle_offset = (-0.3 * config.b - rng.uniform(0.0, 2.0),
                      config.c + rng.uniform(2.5, 4.5))
    return Phantom(
        config=config,
        theta_c=theta_c,
        extent_deg=extent,
        bulb_offset=bulb_offset,
        bulb_sigma=float(rng.uniform(1.7, 2.3)),
        vesicle_offset=vesicle_offset,
        vesicle_sigma=float(rng.uniform(1.3, 1.9)),
        texture_seed=int(rng.integers(0, 2 ** 63 - 1)),
    )


def cross_section(phantom: Phantom, angle: float):
    """In-plane cut ellipse at a sweep angle, or None when the plane misses.

    Returns (centre_depth_mm, semi_depth_mm, semi_horiz_mm).  Treats the cut
    as a parallel section at perpendicular offset d*sin(delta), which is
    exact for a sphere and a faithful approximation for the gentle angles
    involved here.
    """
    cfg = phantom.config
    delta = math.radians(angle - phantom.theta_c)
    s = cfg.d * math.sin(delta)
    support = _support_mm(phantom, delta)
    if abs(s) > support:
        return None
    shrink = math.sqrt(max(0.0, 1.0 - (s / support) ** 2))
    return (cfg.d * math.cos(delta), cfg.b * shrink, cfg.c * shrink)


def ground_truth_position(phantom: Phantom, angle: float) -> str:
    """C within +/-delta_c of the centre (closed interval), P while the
    plane still cuts the gland, O otherwise."""
    _check_angle(phantom, angle)
    delta = abs(angle - phantom.theta_c)
    if delta <= phantom.config.delta_c:
        return "C"
    if delta <= phantom.extent_deg:
        return "P"
    return "O"


def ground_truth_direction(phantom: Phantom, angle: float) -> str:
    """S on the centre band; otherwise rotate toward the centre: L means
    increase the sweep angle (target to the left), R means decrease it."""
    if ground_truth_position(phantom, angle) == "C":
        return "S"
    return "L" if angle < phantom.theta_c else "R"


def _check_angle(phantom: Phantom, angle: float) -> None:
    if not (0.0 <= angle <= phantom.config.arc):
        raise ValueError(f"angle {angle} outside sweep arc [0, {phantom.config.arc}]")


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _frame_rng(phantom: Phantom, angle: float) -> np.random.Generator:
    key = int(np.float64(angle).view(np.uint64))
    return np.random.default_rng(np.random.SeedSequence((phantom.texture_seed, key)))


def render_bscan(phantom: Phantom, angle: float, plain_speckle: bool = False) -> np.ndarray:
    """Render one B-scan-like image (H x W float64 in [0, 1]).

    The image is Rayleigh speckle over which the gland cross-section is
    painted (dark interior, bright rim) plus near-centre features whose
    visibility falls off as exp(-(delta/delta_c)^2).  Quality controls rim
    contrast and additive noise.  ``plain_speckle`` renders the same
    speckle and noise with nothing painted, for background comparisons.
    """
    _check_angle(phantom, angle)
    cfg = phantom.config
    h, w, px = cfg.height, cfg.width, cfg.pixel_size
    rng = _frame_rng(phantom, angle)

    raw = rng.rayleigh(scale=1.0, size=(h, w))
    noise_sigma = 0.02 + 0.03 * (3 - cfg.quality)
    noise = rng.normal(0.0, noise_sigma, size=(h, w))

    speckle = ndimage.gaussian_filter(raw, sigma=_SPECKLE_SMOOTH)
    img = speckle * (_BG_MEAN / speckle.mean())

    if not plain_speckle:
        depth = (np.arange(h)[:, None] + 0.5) * px
        horiz = (np.arange(w)[None, :] - (w - 1) / 2.0) * px
        cut = cross_section(phantom, angle)
        if cut is not None:
            cy, semi_depth, semi_horiz = cut
            rho = np.sqrt(((depth - cy) / max(semi_depth, 1e-6)) ** 2
                          + (horiz / max(semi_horiz, 1e-6)) ** 2)
            interior = 1.0 / (1.0 + np.exp((rho - 1.0) / 0.03))
            img *= 1.0 - (1.0 - _INTERIOR_GAIN) * interior
            rim_gain = 0.12 + 0.10 * cfg.quality
            img += rim_gain * np.exp(-(((rho - 1.0) / 0.055) ** 2))

        fade = math.exp(-((angle - phantom.theta_c) / cfg.delta_c) ** 2)
        if fade > 1e-3:
            centre_depth = cfg.d * math.cos(math.radians(angle - phantom.theta_c))
            img += fade * _feature_layer(phantom, depth, horiz, centre_depth)

    img += noise
    return np.clip(img, 0.0, 1.0)


def _feature_layer(phantom: Phantom, depth, horiz, centre_depth) -> np.ndarray:
    """Bright parametric blobs near the centre plane: bulb + duct + vesicle."""
    b_dz, b_dx = phantom.bulb_offset
    bulb_pos = (centre_depth + b_dz, b_dx)
    ves_dz, ves_dx = phantom.vesicle_offset
    layer = _gauss_blob(depth, horiz, bulb_pos, phantom.bulb_sigma, 0.45)
    layer += _gauss_blob(depth, horiz, (centre_depth + ves_dz, ves_dx),
                         phantom.vesicle_sigma, 0.32)
    layer += _ridge(depth, horiz, bulb_pos, (centre_depth, 0.0), 0.8, 0.28)
    return layer


def _gauss_blob(depth, horiz, centre, sigma, amplitude):
    return amplitude * np.exp(-(((depth - centre[0]) ** 2
                                 + (horiz - centre[1]) ** 2) / (2 * sigma ** 2)))


def _ridge(depth, horiz, p0, p1, sigma, amplitude):
    """Bright line segment from p0 to p1 (the duct analogue)."""
    dz, dx = p1[0] - p0[0], p1[1] - p0[1]
    length_sq = dz * dz + dx * dx
    if length_sq < 1e-9:
        return np.zeros_like(depth + horiz)
    t = ((depth - p0[0]) * dz + (horiz - p0[1]) * dx) / length_sq
    t = np.clip(t, 0.0, 1.0)
    dist_sq = (depth - (p0[0] + t * dz)) ** 2 + (horiz - (p0[1] + t * dx)) ** 2
    return amplitude * np.exp(-dist_sq / (2 * sigma ** 2))


# ---------------------------------------------------------------------------
# sweeps and observers
# ---------------------------------------------------------------------------

def generate_sweep(phantom: Phantom, n_frames: int | None = None) -> SweepVolume:
    """Render a full right-to-left sweep with ground-truth labels attached.

    Frames sit at uniform spacing arc/(n_frames-1).  Recorded poses carry
    bounded tracking jitter (<=0.2 deg, <=0.5 mm); labels always use the
    commanded angle.
    """
    cfg = phantom.config
    if n_frames is None:
        n_frames = cfg.frames_per_sweep
    if n_frames < 10:
        raise ValueError(f"n_frames {n_frames} < 10 (sequence model needs 10)")
    angles = np.linspace(0.0, cfg.arc, n_frames)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x905E)))
    tilt_x = rng.uniform(-3.0, 3.0)
    tilt_z = rng.uniform(-3.0, 3.0)

    images = np.empty((n_frames, cfg.height, cfg.width), dtype=np.float32)
    poses = np.empty((n_frames, 6), dtype=np.float32)
    gt_pos, gt_dir = [], []
    for i, ang in enumerate(angles):
        images[i] = render_bscan(phantom, float(ang)).astype(np.float32)
        jitter_mm = rng.uniform(-0.5, 0.5, size=3)
        jitter_deg = rng.uniform(-0.2, 0.2, size=3)
        poses[i] = np.array([jitter_mm[0], jitter_mm[1], jitter_mm[2],
                             tilt_x + jitter_deg[0],
                             ang + jitter_deg[1],
                             tilt_z + jitter_deg[2]], dtype=np.float32)
        gt_pos.append(ground_truth_position(phantom, float(ang)))
        gt_dir.append(ground_truth_direction(phantom, float(ang)))

    return SweepVolume(
        images=images,
        poses=poses,
        angles=angles,
        gt_position=gt_pos,
        gt_direction=gt_dir,
        quality=cfg.quality,
        phantom_id=f"ph{cfg.seed:08x}",
        theta_c=phantom.theta_c,
        arc=cfg.arc,
        pixel_size=cfg.pixel_size,
        delta_c=cfg.delta_c,
    )


def simulate_observer(sweep: SweepVolume, phantom: Phantom, sigma_obs: float,
                      seed: int) -> ObserverVotes:
    """Label a sweep the way one imperfect observer would.

    The observer applies the ground-truth rules after shifting the centre
    angle and the gland half-extent by independent N(0, sigma_obs) draws
    (one pair per volume).  Direction votes derive from the shifted centre.
    With sigma_obs = 0 the votes equal the ground truth exactly.
    """
    if sigma_obs < 0:
        raise ValueError("sigma_obs must be >= 0")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x0B5)))
    d_centre = float(rng.normal(0.0, sigma_obs)) if sigma_obs > 0 else 0.0
    d_extent = float(rng.normal(0.0, sigma_obs)) if sigma_obs > 0 else 0.0
    centre = phantom.theta_c + d_centre
    extent = phantom.extent_deg + d_extent

    pos, direction = [], []
    for ang in sweep.angles:
        delta = abs(float(ang) - centre)
        if delta <= sweep.delta_c:
            pos.append("C")
            direction.append("S")
        else:
            pos.append("P" if delta <= extent else "O")
            direction.append("L" if float(ang) < centre else "R")
    return ObserverVotes(position=pos, direction=direction,
                         centre_shift_deg=d_centre, extent_shift_deg=d_extent)


def attach_observers(sweep: SweepVolume, phantom: Phantom, n_observers: int,
                     sigma_obs: float, seed: int) -> SweepVolume:
    """Simulate a panel of observers and store their votes on the volume."""
    sweep.observers = [
        simulate_observer(sweep, phantom, sigma_obs,
                          seed=int(np.random.SeedSequence((seed, k)).generate_state(1)[0]))
        for k in range(n_observers)
    ]
    return sweep
