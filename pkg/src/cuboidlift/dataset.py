"""Synthetic dataset generation, serialization and batch composition.

Labeled samples pair projected cuboid keypoints with their 3D shape
sets; unlabeled samples carry local 2D points only and come from a
camera with different intrinsics.  Records go to gzip-compressed JSONL
shards plus a manifest, with all randomness derived from one seed so a
rerun reproduces the files byte for byte.

Batch composition follows the padding rule: labeled samples are grouped
into synthetic images, and each image is topped up to 12 instances with
unlabeled samples before batching.
"""

from __future__ import annotations

import gzip
import json
import os
from dataclasses import dataclass, asdict

import numpy as np

from .crossratio import DEFAULT_GATE, cr_loss_values, edge_quadruples, target_cr
from .geometry import (
    DEFAULT_INTERP,
    PSI,
    TAU,
    BehindCameraError,
    Cuboid,
    PointSet2D,
    PointSet3D,
    _edge_interpolations,
    _yaw_matrix,
    corner_offsets,
    crop_transform,
    project,
    tight_bbox,
    to_local,
    visibility_fraction,
)

FORMAT_VERSION = 1
MANIFEST_NAME = "dataset.json"
PAD_TO_INSTANCES = 12


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics plus sensor size in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")


# KITTI-like geometry for labeled samples; a distinct camera for the
# unlabeled pool exercises camera-agnosticism of the cross-ratio term
DEFAULT_CAMERA = Camera(fx=721.5377, fy=721.5377, cx=609.5593, cy=172.854, width=1242, height=375)
UNLABELED_CAMERA = Camera(fx=1450.0, fy=1450.0, cx=960.0, cy=540.0, width=1920, height=1080)


@dataclass(frozen=True)
class SampleSpec:
    """Generator configuration.

    Dimension priors are plausible car statistics (generator config, not
    fit to any dataset).  Placement draws a pixel inside the margins and
    back-projects it to the sampled depth, which keeps most of the
    cuboid in frame.
    """

    h_range: tuple[float, float] = (1.3, 1.9)
    w_range: tuple[float, float] = (1.5, 2.0)
    l_range: tuple[float, float] = (3.2, 4.8)
    depth_range: tuple[float, float] = (4.0, 60.0)
    u_margin: float = 0.1
    v_band: tuple[float, float] = (0.35, 0.75)
    instances_per_image: tuple[int, int] = (1, 12)
    min_visibility: float = 0.7
    intrinsics_mode: str = "fixed"
    camera: Camera = DEFAULT_CAMERA
    unlabeled_camera: Camera = UNLABELED_CAMERA

    def __post_init__(self):
        for name in ("h_range", "w_range", "l_range", "depth_range", "v_band"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name} must be a nonempty range, got ({lo}, {hi})")
        if self.depth_range[0] <= 0:
            raise ValueError("depth must be positive")
        if not 0 <= self.u_margin < 0.5:
            raise ValueError("u_margin must lie in [0, 0.5)")
        lo, hi = self.instances_per_image
        if not (1 <= lo <= hi <= PAD_TO_INSTANCES):
            raise ValueError(f"instances_per_image must fit 1..{PAD_TO_INSTANCES}")
        if not 0 < self.min_visibility <= 1:
            raise ValueError("min_visibility must lie in (0, 1]")
        if self.intrinsics_mode not in ("fixed", "sampled"):
            raise ValueError(f"unknown intrinsics_mode {self.intrinsics_mode!r}")


@dataclass(frozen=True)
class Pair:
    """One labeled sample: projections, shape set, crop bookkeeping."""

    phi_g: PointSet2D
    phi_l: PointSet2D
    psi: PointSet3D
    crop: object
    bbox: tuple
    visibility: float


def sample_cuboid(rng, spec, camera=None):
    """Draw one cuboid inside the spec ranges, reproducible under seed."""
    cam = camera if camera is not None else spec.camera
    h = rng.uniform(*spec.h_range)
    w = rng.uniform(*spec.w_range)
    l = rng.uniform(*spec.l_range)
    z = rng.uniform(*spec.depth_range)
    u = rng.uniform(spec.u_margin * cam.width, (1.0 - spec.u_margin) * cam.width)
    v = rng.uniform(spec.v_band[0] * cam.height, spec.v_band[1] * cam.height)
    x = (u - cam.cx) / cam.fx * z
    y = (v - cam.cy) / cam.fy * z
    yaw = rng.uniform(-np.pi, np.pi)
    return Cuboid(dims=(h, w, l), centroid=(x, y, z), yaw=yaw)


def _x_rotation(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _z_rotation(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def make_pair(cuboid, camera, interp=DEFAULT_INTERP, patch_size=256, rotation=None):
    """Project a cuboid into a (phi_g, phi_l, psi) sample.

    rotation optionally replaces the yaw-only orientation with a full
    rotation matrix (tilted augmentation).  Raises BehindCameraError
    when any point has non-positive depth; the caller resamples or
    drops.
    """
    if rotation is None:
        rotation = _yaw_matrix(cuboid.yaw)
    t = np.asarray(cuboid.centroid)
    corners = corner_offsets(cuboid.dims) @ rotation.T
    interps = _edge_interpolations(corners, interp)
    psi = PointSet3D(points=np.vstack([corners, interps]), layout=PSI)
    tau_pts = np.vstack([np.zeros(3), corners, interps]) + t
    tau = PointSet3D(points=tau_pts, layout=TAU)
    phi_g = project(tau, camera)
    visibility = visibility_fraction(phi_g, camera.width, camera.height)
    bbox = tight_bbox(phi_g)
    crop = crop_transform(bbox, patch_size=patch_size)
    phi_l = to_local(phi_g, crop)
    return Pair(phi_g=phi_g, phi_l=phi_l, psi=psi, crop=crop, bbox=bbox,
                visibility=visibility)


def add_noise(phi, sigma_px, rng):
    """Gaussian perturbation of global pixel coordinates, i.i.d. per
    coordinate.  sigma_px = 0 returns the input untouched (and draws
    nothing)."""
    if sigma_px < 0:
        raise ValueError("noise sigma must be nonnegative")
    if sigma_px == 0:
        return phi
    pts = phi.points + sigma_px * rng.standard_normal(phi.points.shape)
    return PointSet2D(points=pts, frame=phi.frame)


def _sample_camera(rng, spec, base_camera):
    if spec.intrinsics_mode == "fixed":
        return base_camera
    factor = rng.uniform(0.85, 1.15)
    return Camera(
        fx=base_camera.fx * factor,
        fy=base_camera.fy * factor,
        cx=base_camera.cx,
        cy=base_camera.cy,
        width=base_camera.width,
        height=base_camera.height,
    )


def _accepted_pair(rng, spec, camera, interp, max_attempts=10000):
    for _ in range(max_attempts):
        cuboid = sample_cuboid(rng, spec, camera)
        try:
            pair = make_pair(cuboid, camera, interp)
        except BehindCameraError:
            continue
        if pair.visibility >= spec.min_visibility:
            return cuboid, pair
    raise RuntimeError("placement sampler failed to produce a visible cuboid")


def _camera_dict(cam):
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height}


def _labeled_record(idx, cuboid, pair, camera, tilt=None):
    rec = {
        "id": idx,
        "labeled": True,
        "image": None,  # filled by the grouping pass
        "camera": _camera_dict(camera),
        "cuboid": {
            "dims": list(cuboid.dims),
            "centroid": list(cuboid.centroid),
            "yaw": cuboid.yaw,
        },
        "phi_g": pair.phi_g.points.tolist(),
        "phi_l": pair.phi_l.points.tolist(),
        "psi": pair.psi.points.tolist(),
        "crop": {
            "scale": pair.crop.scale,
            "translation": list(pair.crop.translation),
            "patch_size": pair.crop.patch_size,
        },
        "bbox": list(pair.bbox),
        "visibility": pair.visibility,
    }
    if tilt is not None:
        rec["tilt"] = {"pitch": tilt[0], "roll": tilt[1]}
    return rec


def _validate_labeled(records, interp):
    # fail fast: every stored sample must satisfy the cross-ratio
    # identity on ungated local quadruples and have a centered shape set
    locals_2d = np.array([rec["phi_l"] for rec in records])
    quads = edge_quadruples(TAU, q=interp.q)
    values = cr_loss_values(locals_2d, quads, target_cr(interp), DEFAULT_GATE)
    if values.size and values.max() > 1e-16:
        raise AssertionError(f"cross-ratio residual {values.max():g} in generated data")
    centers = np.array([rec["psi"] for rec in records]).mean(axis=1)
    if centers.size and np.abs(centers).max() > 1e-9:
        raise AssertionError("generated shape set is not centered")


def _iter_labeled(rng_base, rng_aug, rng_img, spec, base_count, augment_factor,
                  interp, so3_tilt):
    # image ids are assigned inline: draw a group size, fill it, move on
    next_id = 0
    image_id = -1
    left_in_image = 0
    lo, hi = spec.instances_per_image

    def assign(record):
        nonlocal next_id, image_id, left_in_image
        if left_in_image == 0:
            image_id += 1
            left_in_image = int(rng_img.integers(lo, hi + 1))
        left_in_image -= 1
        record["id"] = next_id
        record["image"] = image_id
        next_id += 1
        return record

    for _ in range(base_count):
        camera = _sample_camera(rng_base, spec, spec.camera)
        cuboid, pair = _accepted_pair(rng_base, spec, camera, interp)
        yield assign(_labeled_record(0, cuboid, pair, camera))
        for _ in range(augment_factor - 1):
            yaw = rng_aug.uniform(-np.pi, np.pi)
            tilt = None
            rotation = None
            variant = Cuboid(dims=cuboid.dims, centroid=cuboid.centroid, yaw=yaw)
            if so3_tilt > 0:
                pitch = rng_aug.uniform(-so3_tilt, so3_tilt)
                roll = rng_aug.uniform(-so3_tilt, so3_tilt)
                tilt = (pitch, roll)
                rotation = _yaw_matrix(yaw) @ _x_rotation(pitch) @ _z_rotation(roll)
            try:
                vpair = make_pair(variant, camera, interp, rotation=rotation)
            except BehindCameraError:
                continue
            if vpair.visibility < spec.min_visibility:
                continue
            yield assign(_labeled_record(0, variant, vpair, camera, tilt))


def _iter_unlabeled(rng_unl, spec, unlabeled_count, interp):
    for i in range(unlabeled_count):
        camera = _sample_camera(rng_unl, spec, spec.unlabeled_camera)
        _, pair = _accepted_pair(rng_unl, spec, camera, interp)
        yield {
            "id": i,
            "labeled": False,
            "camera": _camera_dict(camera),
            "phi_l": pair.phi_l.points.tolist(),
        }


def _generation_rngs(seed):
    root = np.random.SeedSequence(seed)
    return tuple(np.random.default_rng(s) for s in root.spawn(4))


def generate_dataset(seed, spec, base_count, augment_factor=1, unlabeled_count=0,
                     interp=DEFAULT_INTERP, so3_tilt=0.0):
    """Generate labeled pairs (with rotation augmentation) and an
    unlabeled pool, materialized as record lists.

    Each base cuboid contributes itself plus augment_factor - 1
    re-renders under fresh yaws at the same position; re-renders failing
    the visibility rule are dropped, base pairs are resampled until
    accepted.  so3_tilt > 0 adds uniform pitch/roll within +-so3_tilt to
    the re-renders.  For large runs prefer generate_to_dir, which
    streams records to shards instead of holding them all.
    """
    if base_count < 1 or augment_factor < 1:
        raise ValueError("base_count and augment_factor must be at least 1")
    rng_base, rng_aug, rng_unl, rng_img = _generation_rngs(seed)
    labeled = list(
        _iter_labeled(rng_base, rng_aug, rng_img, spec, base_count, augment_factor,
                      interp, so3_tilt)
    )
    unlabeled = list(_iter_unlabeled(rng_unl, spec, unlabeled_count, interp))
    _validate_labeled(labeled, interp)
    return labeled, unlabeled


# ---- serialization ----


def _round_floats(obj):
    if isinstance(obj, float):
        return round(obj, 6)
    if isinstance(obj, list):
        return [_round_floats(x) for x in obj]
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    return obj


def _write_shard(path, records):
    with open(path, "wb") as fh:
        # fixed header fields keep reruns byte-identical
        with gzip.GzipFile(filename="", mode="wb", fileobj=fh, mtime=0,
                           compresslevel=1) as gz:
            for rec in records:
                line = json.dumps(_round_floats(rec), separators=(",", ":"))
                gz.write(line.encode())
                gz.write(b"\n")


def _chunked(iterator, size):
    chunk = []
    for item in iterator:
        chunk.append(item)
        if len(chunk) == size:
            yield chunk
            chunk = []
    if chunk:
        yield chunk


def _write_manifest(out_dir, shards, counts, seed, spec, interp, extra):
    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": seed,
        "spec": asdict(spec),
        "interp_betas": list(interp.betas),
        "counts": counts,
        "shards": shards,
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as fh:
        json.dump(_round_floats(manifest), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def write_dataset(out_dir, labeled, unlabeled, seed, spec, interp=DEFAULT_INTERP,
                  shard_size=10000, extra=None):
    """Write already-materialized record lists as shards plus manifest."""
    os.makedirs(out_dir, exist_ok=True)
    shards = []
    for kind, records in (("labeled", labeled), ("unlabeled", unlabeled)):
        for start in range(0, len(records), shard_size):
            chunk = records[start : start + shard_size]
            name = f"{kind}-{start // shard_size:05d}.jsonl.gz"
            _write_shard(os.path.join(out_dir, name), chunk)
            shards.append({"path": name, "kind": kind, "records": len(chunk)})
    counts = {"labeled": len(labeled), "unlabeled": len(unlabeled)}
    return _write_manifest(out_dir, shards, counts, seed, spec, interp, extra)


def generate_to_dir(out_dir, seed, spec, base_count, augment_factor=1,
                    unlabeled_count=0, interp=DEFAULT_INTERP, so3_tilt=0.0,
                    shard_size=10000, extra=None):
    """Streaming generation: records go to shards as they are produced.

    Memory stays bounded by one shard.  Each labeled shard is validated
    (cross-ratio and centering) before it is written.  Produces the same
    bytes as generate_dataset + write_dataset for identical arguments.
    """
    if base_count < 1 or augment_factor < 1:
        raise ValueError("base_count and augment_factor must be at least 1")
    os.makedirs(out_dir, exist_ok=True)
    rng_base, rng_aug, rng_unl, rng_img = _generation_rngs(seed)
    shards = []
    counts = {"labeled": 0, "unlabeled": 0}
    streams = (
        ("labeled", _iter_labeled(rng_base, rng_aug, rng_img, spec, base_count,
                                  augment_factor, interp, so3_tilt)),
        ("unlabeled", _iter_unlabeled(rng_unl, spec, unlabeled_count, interp)),
    )
    for kind, stream in streams:
        for shard_idx, chunk in enumerate(_chunked(stream, shard_size)):
            if kind == "labeled":
                _validate_labeled(chunk, interp)
            name = f"{kind}-{shard_idx:05d}.jsonl.gz"
            _write_shard(os.path.join(out_dir, name), chunk)
            shards.append({"path": name, "kind": kind, "records": len(chunk)})
            counts[kind] += len(chunk)
    return _write_manifest(out_dir, shards, counts, seed, spec, interp, extra)


def read_manifest(dataset_dir):
    with open(os.path.join(dataset_dir, MANIFEST_NAME)) as fh:
        return json.load(fh)


def read_records(dataset_dir, kind=None):
    """Iterate records across shards in manifest order."""
    manifest = read_manifest(dataset_dir)
    for shard in manifest["shards"]:
        if kind is not None and shard["kind"] != kind:
            continue
        with gzip.open(os.path.join(dataset_dir, shard["path"]), "rt") as fh:
            for line in fh:
                yield json.loads(line)


# ---- training arrays ----


@dataclass
class TrainData:
    """Column arrays over the labeled set plus the unlabeled local pool.

    inputs are ray-normalized image coordinates, targets the flattened
    shape sets.  local holds the (possibly noise-perturbed) normalized
    patch points driving the 2D and cross-ratio monitors; local_clean
    the noise-free reference.
    """

    inputs: np.ndarray
    targets: np.ndarray
    local: np.ndarray
    local_clean: np.ndarray
    unlabeled_local: np.ndarray
    groups: list
    yaw: np.ndarray
    dims: np.ndarray
    centroid: np.ndarray
    bbox: np.ndarray
    image: np.ndarray
    visibility: np.ndarray
    phi_g: np.ndarray
    phi_g_noisy: np.ndarray

    def epoch_batches(self, rng, batch_size, mixed=True):
        if not mixed:
            raise ValueError("plain batching is handled by the training loop")
        return compose_mixed_batches(
            self.groups, self.unlabeled_local.shape[0], batch_size, rng
        )


def load_training_data(dataset_dir, noise_sigma_px=0.0, seed=0, dtype=np.float32):
    """Assemble TrainData from a generated dataset directory.

    Records are streamed into preallocated arrays so memory stays at the
    column arrays.  Keypoint noise simulates a detector: drawn once here
    (deterministic in seed), applied in pixel space, then carried
    through the ray normalization and the crop transform.
    """
    manifest = read_manifest(dataset_dir)
    n = manifest["counts"]["labeled"]
    m = manifest["counts"]["unlabeled"]
    if n == 0:
        raise ValueError(f"no labeled records under {dataset_dir}")
    k = None

    phi_g = cam = scale = translation = patch = None
    local_clean = psi = None
    yaw = np.empty(n)
    dims = np.empty((n, 3))
    centroid = np.empty((n, 3))
    bbox = np.empty((n, 4))
    image = np.empty(n, dtype=int)
    visibility = np.empty(n)
    for i, rec in enumerate(read_records(dataset_dir, "labeled")):
        if phi_g is None:
            k = len(rec["phi_g"])
            phi_g = np.empty((n, k, 2))
            local_clean = np.empty((n, k, 2))
            psi = np.empty((n, k - 1, 3))
            cam = np.empty((n, 4))
            scale = np.empty(n)
            translation = np.empty((n, 2))
            patch = np.empty(n)
        phi_g[i] = rec["phi_g"]
        local_clean[i] = rec["phi_l"]
        psi[i] = rec["psi"]
        cam[i] = [rec["camera"][key] for key in ("fx", "fy", "cx", "cy")]
        scale[i] = rec["crop"]["scale"]
        translation[i] = rec["crop"]["translation"]
        patch[i] = rec["crop"]["patch_size"]
        yaw[i] = rec["cuboid"]["yaw"]
        dims[i] = rec["cuboid"]["dims"]
        centroid[i] = rec["cuboid"]["centroid"]
        bbox[i] = rec["bbox"]
        image[i] = rec["image"]
        visibility[i] = rec["visibility"]

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 3]))
    if noise_sigma_px > 0:
        phi_noisy = phi_g + noise_sigma_px * rng.standard_normal(phi_g.shape)
    else:
        phi_noisy = phi_g

    rays = np.empty_like(phi_noisy)
    rays[:, :, 0] = (phi_noisy[:, :, 0] - cam[:, None, 2]) / cam[:, None, 0]
    rays[:, :, 1] = (phi_noisy[:, :, 1] - cam[:, None, 3]) / cam[:, None, 1]
    inputs = rays.reshape(n, -1).astype(dtype)

    local = (phi_noisy - translation[:, None, :]) * (scale / patch)[:, None, None]

    order = {}
    for i, img in enumerate(image):
        order.setdefault(int(img), []).append(i)
    groups = [np.array(order[key], dtype=int) for key in sorted(order)]

    unlabeled_local = np.empty((m, k, 2))
    for i, rec in enumerate(read_records(dataset_dir, "unlabeled")):
        unlabeled_local[i] = rec["phi_l"]

    return TrainData(
        inputs=inputs,
        targets=psi.reshape(n, -1).astype(dtype),
        local=local.astype(dtype),
        local_clean=local_clean.astype(dtype),
        unlabeled_local=unlabeled_local.astype(dtype),
        groups=groups,
        yaw=yaw,
        dims=dims,
        centroid=centroid,
        bbox=bbox,
        image=image,
        visibility=visibility,
        phi_g=phi_g,
        phi_g_noisy=phi_noisy,
    )


def compose_mixed_batches(groups, unlabeled_count, batch_size, rng,
                          pad_to=PAD_TO_INSTANCES):
    """Batches of (labeled_indices, unlabeled_indices).

    Every image is padded to pad_to instances with unlabeled draws (a
    permutation of the pool first, with replacement once exhausted), the
    padded image stream is chunked into batches, and each labeled sample
    appears exactly once per epoch.  Chunks left with a single labeled
    sample are merged into a neighbor so batch normalization always sees
    at least two.
    """
    if not groups:
        raise ValueError("no labeled image groups")
    if unlabeled_count == 0 and any(len(g) < pad_to for g in groups):
        raise ValueError("mixed batching needs an unlabeled pool for padding")
    flags = []
    indices = []
    pool = rng.permutation(unlabeled_count) if unlabeled_count else np.empty(0, dtype=int)
    ptr = 0
    for gi in rng.permutation(len(groups)):
        members = groups[gi]
        for i in members[rng.permutation(len(members))]:
            flags.append(True)
            indices.append(int(i))
        for _ in range(max(0, pad_to - len(members))):
            if ptr < pool.shape[0]:
                u = int(pool[ptr])
                ptr += 1
            else:
                u = int(rng.integers(unlabeled_count))
            flags.append(False)
            indices.append(u)

    flags = np.array(flags, dtype=bool)
    indices = np.array(indices, dtype=int)
    batches = []
    for start in range(0, indices.shape[0], batch_size):
        f = flags[start : start + batch_size]
        ix = indices[start : start + batch_size]
        batches.append((ix[f], ix[~f]))
    merged = []
    for labeled_idx, unlabeled_idx in batches:
        if merged and 0 < labeled_idx.shape[0] < 2:
            prev_l, prev_u = merged.pop()
            labeled_idx = np.concatenate([prev_l, labeled_idx])
            unlabeled_idx = np.concatenate([prev_u, unlabeled_idx])
        merged.append((labeled_idx, unlabeled_idx))
    if merged and 0 < merged[0][0].shape[0] < 2 and len(merged) > 1:
        first_l, first_u = merged.pop(0)
        nl, nu = merged[0]
        merged[0] = (np.concatenate([first_l, nl]), np.concatenate([first_u, nu]))
    return merged
