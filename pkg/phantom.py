"""
phantom.py
----------
Synthetic brain-like phantoms with exact tissue labels, rendered under
per-scanner style profiles into traveling-subject scenarios.

A subject is a short stack of slices drawn from one anatomy seed:
nested wobbled ellipses give the background / CSF rim / GM ribbon / WM
core, plus ventricles. Scanner profiles turn the same anatomy into
different appearances.

Bundle directory layout:
    manifest.json
    target_train_<k>_image.img1   target_train_<k>_labels.img1
    source_labeled_<k>_image.img1 source_labeled_<k>_labels.img1
    pair_<k>_source.img1  pair_<k>_target.img1  pair_<k>_labels.img1
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import ndimage

import imagecore
from errors import ContractError, DegenerateInputError, FormatError
from style_manifold import DEFAULT_BOUNDS, PARAM_NAMES, ParamBounds, StyleParams, apply_style

TISSUE_INTENSITY = np.array([0.0, 0.15, 0.45, 0.75])   # bg, CSF, GM, WM
TEXTURE_AMPLITUDE = 0.03
TEXTURE_SIGMA = (2.0, 8.0, 8.0)                        # slice, row, col
PARTIAL_VOLUME_SIGMA = 0.5
# Minimum empty border around the head, as a fraction of the canvas side
CANVAS_MARGIN_FRACTION = 1.0 / 32.0
MIN_CLASS_FRACTION = 0.01
MAX_ATTEMPTS = 10

# Per-slice anatomy drift away from the central slice
SLICE_SHRINK = 0.01
PHASE_DRIFT = 0.08

RENDER_LO_PCT = 0.01
RENDER_HI_PCT = 0.99


@dataclass(frozen=True)
class AnatomySpec:
    seed: int = 0
    canvas: int = 128
    head_axes: Tuple[float, float] = (50.0, 58.0)     # semi-axes (x, y)
    csf_rim: float = 4.0
    gm_thickness: float = 7.0
    ventricle_count: int = 2
    ventricle_axes: Tuple[float, float] = (5.0, 11.0)
    ventricle_spacing: float = 12.0
    wobble_amplitude: float = 2.0
    wobble_frequency: int = 5

    def __post_init__(self):
        reach = max(self.head_axes) + self.wobble_amplitude
        margin = CANVAS_MARGIN_FRACTION * self.canvas
        if reach + margin > self.canvas / 2.0:
            raise ContractError(
                f"head reach {reach} leaves less than {margin:g}px margin on a {self.canvas}px canvas"
            )
        if self.csf_rim <= 0 or self.gm_thickness <= self.wobble_amplitude:
            raise ContractError("CSF rim must be positive and GM ribbon thicker than the wobble")
        if self.ventricle_count < 0:
            raise ContractError("ventricle_count must be >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> "AnatomySpec":
        data = dict(data)
        for key in ("head_axes", "ventricle_axes"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass(frozen=True)
class ScannerProfile:
    name: str
    base_style: StyleParams
    jitter: Dict[str, float] = field(default_factory=dict)
    render_seed: int = 0

    def jitter_vector(self) -> np.ndarray:
        return np.array([float(self.jitter.get(n, 0.0)) for n in PARAM_NAMES])

    def check(self, bounds: ParamBounds = DEFAULT_BOUNDS):
        unknown = set(self.jitter) - set(PARAM_NAMES)
        if unknown:
            raise ContractError(f"profile {self.name}: unknown jitter fields {sorted(unknown)}")
        base = self.base_style.as_vector()
        spread = 3.0 * self.jitter_vector()
        for name, rng, b, s in zip(PARAM_NAMES, bounds.ranges(), base, spread):
            if s < 0 or not (rng.contains(b - s) and rng.contains(b + s)):
                raise ContractError(f"profile {self.name}: {name} {b} +/- {s} leaves [{rng.lo}, {rng.hi}]")

    def to_dict(self) -> dict:
        return {"name": self.name, "base_style": self.base_style.to_dict(),
                "jitter": dict(self.jitter), "render_seed": self.render_seed}

    @classmethod
    def from_dict(cls, data: dict) -> "ScannerProfile":
        return cls(data["name"], StyleParams.from_dict(data["base_style"]),
                   {k: float(v) for k, v in data.get("jitter", {}).items()}, int(data["render_seed"]))


DEFAULT_TARGET_PROFILE = ScannerProfile(
    name="target",
    base_style=StyleParams(noise_sigma=0.01),
    jitter={"scale": 0.02, "offset": 0.01, "gamma": 0.02, "blur_sharp": 0.05},
    render_seed=101,
)

DEFAULT_SOURCE_PROFILE = ScannerProfile(
    name="source",
    base_style=StyleParams(scale=0.7, gamma=1.5, blur_sharp=0.5, noise_sigma=0.005),
    jitter={"scale": 0.02, "offset": 0.01, "gamma": 0.02, "blur_sharp": 0.05},
    render_seed=202,
)


@dataclass(frozen=True)
class Scenario:
    target: ScannerProfile = DEFAULT_TARGET_PROFILE
    source: ScannerProfile = DEFAULT_SOURCE_PROFILE
    n_target_train: int = 6
    n_source_labeled: int = 1
    n_eval_travel_pairs: int = 4
    slices_per_subject: int = 3
    anatomy: AnatomySpec = AnatomySpec()

    def check(self, bounds: ParamBounds = DEFAULT_BOUNDS):
        counts = (self.n_target_train, self.n_source_labeled,
                  self.n_eval_travel_pairs, self.slices_per_subject)
        if min(counts) < 1:
            raise ContractError(f"scenario counts must be >= 1, got {counts}")
        self.target.check(bounds)
        self.source.check(bounds)
        # the style manifold adds noise but cannot remove it
        src_max = self.source.base_style.noise_sigma + 3.0 * self.source.jitter.get("noise_sigma", 0.0)
        tgt_min = self.target.base_style.noise_sigma - 3.0 * self.target.jitter.get("noise_sigma", 0.0)
        if src_max > tgt_min:
            raise ContractError(f"source noise (up to {src_max}) exceeds target noise (from {tgt_min})")

    def to_dict(self) -> dict:
        return {
            "target": self.target.to_dict(),
            "source": self.source.to_dict(),
            "n_target_train": self.n_target_train,
            "n_source_labeled": self.n_source_labeled,
            "n_eval_travel_pairs": self.n_eval_travel_pairs,
            "slices_per_subject": self.slices_per_subject,
            "anatomy": asdict(self.anatomy),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        return cls(
            target=ScannerProfile.from_dict(data["target"]),
            source=ScannerProfile.from_dict(data["source"]),
            n_target_train=int(data["n_target_train"]),
            n_source_labeled=int(data["n_source_labeled"]),
            n_eval_travel_pairs=int(data["n_eval_travel_pairs"]),
            slices_per_subject=int(data["slices_per_subject"]),
            anatomy=AnatomySpec.from_dict(data["anatomy"]),
        )


@dataclass
class Subject:
    role: str
    index: int
    anatomy_seed: int
    labels: np.ndarray        # (slices, h, w) uint8
    image: np.ndarray         # (slices, h, w) float64
    style: StyleParams
    clamped: List[str] = field(default_factory=list)


@dataclass
class TravelPair:
    pair_id: int
    anatomy_seed: int
    labels: np.ndarray
    source: np.ndarray
    target: np.ndarray
    source_style: StyleParams
    target_style: StyleParams


@dataclass
class Bundle:
    scenario: Scenario
    master_seed: int
    target_train: List[Subject]
    source_labeled: List[Subject]
    travel_pairs: List[TravelPair]

    def anatomy_seeds(self) -> Dict[str, List[int]]:
        return {
            "target_train": [s.anatomy_seed for s in self.target_train],
            "source_labeled": [s.anatomy_seed for s in self.source_labeled],
            "travel_pairs": [p.anatomy_seed for p in self.travel_pairs],
        }


# ============================================================================
# Anatomy
# ============================================================================

def _wobble(theta: np.ndarray, freq: int, phases: np.ndarray) -> np.ndarray:
    """Two-harmonic boundary ripple in [-1, 1]."""
    return 0.5 * (np.sin(freq * theta + phases[0]) + np.sin((freq + 1) * theta + phases[1]))


def _slice_labels(spec: AnatomySpec, offset: float, amplitude: float,
                  phases: np.ndarray, vent_scale: np.ndarray) -> np.ndarray:
    n = spec.canvas
    c = (n - 1) / 2.0
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) - c

    shrink = max(1.0 - SLICE_SHRINK * offset * offset, 0.6)
    a, b = spec.head_axes[0] * shrink, spec.head_axes[1] * shrink
    drift = PHASE_DRIFT * offset

    r = np.hypot(xx, yy)
    theta = np.arctan2(yy, xx)
    r_ellipse = a * b / np.sqrt((b * np.cos(theta)) ** 2 + (a * np.sin(theta)) ** 2)
    depth = r_ellipse + amplitude * _wobble(theta, spec.wobble_frequency, phases[:2] + drift) - r
    wm_depth = (spec.csf_rim + spec.gm_thickness
                + amplitude * _wobble(theta, 2 * spec.wobble_frequency, phases[2:] - drift))

    labels = np.zeros((n, n), dtype=np.uint8)
    labels[depth >= 0] = 1
    labels[depth >= spec.csf_rim] = 2
    labels[depth >= wm_depth] = 3

    for v in range(spec.ventricle_count):
        vx = (v - (spec.ventricle_count - 1) / 2.0) * spec.ventricle_spacing
        ax = spec.ventricle_axes[0] * shrink * vent_scale[v]
        ay = spec.ventricle_axes[1] * shrink * vent_scale[v]
        inside = ((xx - vx) / ax) ** 2 + ((yy + 3.0) / ay) ** 2 <= 1.0
        labels[inside & (labels == 3)] = 1
    return labels


def _class_fractions(labels: np.ndarray) -> np.ndarray:
    return np.bincount(labels.ravel(), minlength=imagecore.N_CLASSES) / labels.size


def generate_subject(spec: AnatomySpec, slice_count: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """
    Label stack and base intensity volume for one anatomy seed.

    Slices are spaced one unit apart around the central slice; the head
    shrinks and the boundary ripple drifts slowly with distance from it.
    """
    if slice_count < 1:
        raise ContractError(f"slice_count must be >= 1, got {slice_count}")
    offsets = np.arange(slice_count) - (slice_count - 1) / 2.0

    for attempt in range(MAX_ATTEMPTS):
        rng = np.random.default_rng([spec.seed, attempt])
        amplitude = spec.wobble_amplitude * 0.5 ** attempt
        phases = rng.uniform(0.0, 2.0 * math.pi, size=4)
        vent_scale = rng.uniform(0.85, 1.15, size=spec.ventricle_count)
        texture = rng.standard_normal((slice_count, spec.canvas, spec.canvas))

        labels = np.stack([_slice_labels(spec, o, amplitude, phases, vent_scale) for o in offsets])
        fractions = np.array([_class_fractions(sl) for sl in labels])
        if np.all(fractions >= MIN_CLASS_FRACTION):
            break
        logging.debug(f"Anatomy seed {spec.seed}: class dropped out on attempt {attempt}, regenerating")
    else:
        raise DegenerateInputError(
            f"anatomy seed {spec.seed} lost a tissue class in all {MAX_ATTEMPTS} attempts"
        )

    texture = ndimage.gaussian_filter(texture, sigma=TEXTURE_SIGMA, mode=imagecore.BORDER_MODE)
    texture *= TEXTURE_AMPLITUDE / max(float(np.max(np.abs(texture))), 1e-12)

    base = TISSUE_INTENSITY[labels] + texture * (labels > 0)
    base = np.stack([imagecore.gaussian_blur(sl, PARTIAL_VOLUME_SIGMA) for sl in base])
    return labels, np.clip(base, 0.0, 1.0)


def generate_anatomy(spec: AnatomySpec) -> Tuple[np.ndarray, np.ndarray]:
    labels, base = generate_subject(spec, 1)
    return labels[0], base[0]


# ============================================================================
# Rendering
# ============================================================================

def subject_style(profile: ScannerProfile, subject_index: int,
                  bounds: ParamBounds = DEFAULT_BOUNDS) -> Tuple[StyleParams, List[str]]:
    """Profile base style plus the subject's seeded jitter, clamped into bounds."""
    rng = np.random.default_rng([profile.render_seed, subject_index, 0])
    draw = profile.base_style.as_vector() + profile.jitter_vector() * rng.standard_normal(len(PARAM_NAMES))
    style, moved = StyleParams(*draw).clamped(bounds)
    if moved:
        logging.debug(f"{profile.name} subject {subject_index}: clamped {moved}")
    return style, moved


def render_volume(base: np.ndarray, style: StyleParams, noise_seed: Sequence[int],
                  bounds: ParamBounds = DEFAULT_BOUNDS) -> np.ndarray:
    vol = imagecore.as_volume(base)
    return np.stack([
        imagecore.normalize_percentile(
            apply_style(sl, style, noise_seed=[*noise_seed, k], bounds=bounds),
            RENDER_LO_PCT, RENDER_HI_PCT,
        )
        for k, sl in enumerate(vol)
    ])


def render_subject(base: np.ndarray, profile: ScannerProfile, subject_index: int,
                   bounds: ParamBounds = DEFAULT_BOUNDS) -> np.ndarray:
    """Render a base image (or volume) as this scanner would for this subject."""
    style, _ = subject_style(profile, subject_index, bounds)
    vol = render_volume(base, style, [profile.render_seed, subject_index, 1], bounds)
    return vol[0] if np.ndim(base) == 2 else vol


# ============================================================================
# Scenario bundles
# ============================================================================

def anatomy_seed_base(master_seed: int) -> int:
    return int(np.random.SeedSequence(master_seed).generate_state(1)[0])


def build_scenario(scn: Scenario = Scenario(), master_seed: int = 7,
                   bounds: ParamBounds = DEFAULT_BOUNDS) -> Bundle:
    """
    Target training subjects, labeled source subjects and travel pairs.

    Anatomy seeds are consecutive from a base derived from master_seed, so
    the three sets never share an anatomy. Subject indices are global
    across sets, so every rendering gets its own jitter and noise streams.
    """
    scn.check(bounds)
    base_seed = anatomy_seed_base(master_seed)
    slices = scn.slices_per_subject
    ordinal = 0

    def make_subject(role, k, profile):
        nonlocal ordinal
        n = ordinal
        ordinal += 1
        labels, base = generate_subject(replace(scn.anatomy, seed=base_seed + n), slices)
        style, moved = subject_style(profile, n, bounds)
        image = render_volume(base, style, [profile.render_seed, n, 1], bounds)
        return Subject(role, k, base_seed + n, labels, image, style, moved), base, n

    target_train = [make_subject("target_train", k, scn.target)[0] for k in range(scn.n_target_train)]
    source_labeled = [make_subject("source_labeled", k, scn.source)[0] for k in range(scn.n_source_labeled)]

    pairs = []
    for k in range(scn.n_eval_travel_pairs):
        src, base, n = make_subject("pair_source", k, scn.source)
        # same subject index, different scanner: independent jitter and noise streams
        tgt_style, _ = subject_style(scn.target, n, bounds)
        tgt = render_volume(base, tgt_style, [scn.target.render_seed, n, 1], bounds)
        pairs.append(TravelPair(k, src.anatomy_seed, src.labels, src.image, tgt, src.style, tgt_style))

    logging.info(
        f"✓ Scenario built (master seed {master_seed}): {len(target_train)} target, "
        f"{len(source_labeled)} labeled source, {len(pairs)} travel pairs, {slices} slices each"
    )
    return Bundle(scn, master_seed, target_train, source_labeled, pairs)


def write_bundle(bundle: Bundle, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []

    for subject in bundle.target_train + bundle.source_labeled:
        stem = f"{subject.role}_{subject.index}"
        imagecore.write_volume(subject.image, out_dir / f"{stem}_image.img1")
        imagecore.write_volume(subject.labels, out_dir / f"{stem}_labels.img1")
        entries.append({
            "role": subject.role, "index": subject.index, "anatomy_seed": subject.anatomy_seed,
            "image": f"{stem}_image.img1", "labels": f"{stem}_labels.img1",
            "style": subject.style.to_dict(), "clamped": subject.clamped,
        })

    for pair in bundle.travel_pairs:
        stem = f"pair_{pair.pair_id}"
        imagecore.write_volume(pair.source, out_dir / f"{stem}_source.img1")
        imagecore.write_volume(pair.target, out_dir / f"{stem}_target.img1")
        imagecore.write_volume(pair.labels, out_dir / f"{stem}_labels.img1")
        entries.append({
            "role": "travel_pair", "index": pair.pair_id, "anatomy_seed": pair.anatomy_seed,
            "source": f"{stem}_source.img1", "target": f"{stem}_target.img1",
            "labels": f"{stem}_labels.img1",
            "source_style": pair.source_style.to_dict(), "target_style": pair.target_style.to_dict(),
        })

    manifest = {
        "format": "tgtfree-bundle/1",
        "master_seed": bundle.master_seed,
        "scenario": bundle.scenario.to_dict(),
        "entries": entries,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    logging.info(f"Bundle written: {out_dir} ({len(entries)} entries)")
    return path


def read_bundle(bundle_dir: Path) -> Bundle:
    bundle_dir = Path(bundle_dir)
    manifest_path = bundle_dir / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"no manifest.json in {bundle_dir}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        scenario = Scenario.from_dict(manifest["scenario"])
        entries = manifest["entries"]
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise FormatError(f"unreadable bundle manifest in {bundle_dir}: {e}")

    def load(name):
        return imagecore.read_volume(bundle_dir / name)

    target_train, source_labeled, pairs = [], [], []
    for e in entries:
        if e["role"] == "travel_pair":
            pairs.append(TravelPair(
                e["index"], e["anatomy_seed"], load(e["labels"]), load(e["source"]), load(e["target"]),
                StyleParams.from_dict(e["source_style"]), StyleParams.from_dict(e["target_style"]),
            ))
            continue
        subject = Subject(e["role"], e["index"], e["anatomy_seed"], load(e["labels"]),
                          load(e["image"]), StyleParams.from_dict(e["style"]), list(e.get("clamped", [])))
        (target_train if e["role"] == "target_train" else source_labeled).append(subject)

    logging.info(f"Bundle read: {bundle_dir}")
    return Bundle(scenario, int(manifest["master_seed"]), target_train, source_labeled, pairs)


def training_pairs(subjects: List[Subject]) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Flatten subjects into (slice image, slice labels) training pairs."""
    return [(img, lab) for s in subjects for img, lab in zip(s.image, s.labels)]

