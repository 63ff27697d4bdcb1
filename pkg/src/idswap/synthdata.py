"""Procedural synthetic face renderer and dataset builder.

Faces are rendered deterministically from explicit identity parameters (face
shape, skin/eye color, eye spacing, nose length) and attribute parameters
(pose angles, mouth curvature, lighting gradient, background color). Edges are
anti-aliased so small pose changes move pixel statistics smoothly, which keeps
linear probes on the ground truth meaningful.

Images are stored as 8-bit PNGs with binary mask PNGs and a line-delimited
JSON manifest; loading normalizes pixels to [-1, 1].
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from PIL import Image

IDENTITY_RANGES = {
    "face_aspect": (0.7, 1.3),
    "skin_rgb": (0.2, 0.9),
    "eye_spacing": (0.2, 0.45),
    "eye_rgb": (0.0, 0.6),
    "nose_len": (0.1, 0.3),
}

ATTRIBUTE_RANGES = {
    "yaw": (-0.5, 0.5),
    "roll": (-0.5, 0.5),
    "pitch": (-0.5, 0.5),
    "mouth_curve": (-1.0, 1.0),
    "brightness_grad": (-0.3, 0.3),
    "bg_rgb": (0.0, 1.0),
}

ATTRIBUTE_FIELDS = ("yaw", "roll", "pitch", "mouth_curve", "brightness_grad")


@dataclass(frozen=True)
class IdentityParams:
    face_aspect: float
    skin_rgb: tuple[float, float, float]
    eye_spacing: float
    eye_rgb: tuple[float, float, float]
    nose_len: float
    identity_id: int

    def flat(self) -> list[float]:
        return [self.face_aspect, *self.skin_rgb, self.eye_spacing, *self.eye_rgb, self.nose_len]

    @staticmethod
    def from_flat(values: list[float], identity_id: int) -> "IdentityParams":
        return IdentityParams(
            face_aspect=values[0],
            skin_rgb=tuple(values[1:4]),
            eye_spacing=values[4],
            eye_rgb=tuple(values[5:8]),
            nose_len=values[8],
            identity_id=identity_id,
        )


@dataclass(frozen=True)
class AttributeParams:
    yaw: float
    roll: float
    pitch: float
    mouth_curve: float
    brightness_grad: float
    bg_rgb: tuple[float, float, float]

    def flat(self) -> list[float]:
        return [self.yaw, self.roll, self.pitch, self.mouth_curve, self.brightness_grad, *self.bg_rgb]

    @staticmethod
    def from_flat(values: list[float]) -> "AttributeParams":
        return AttributeParams(
            yaw=values[0], roll=values[1], pitch=values[2],
            mouth_curve=values[3], brightness_grad=values[4],
            bg_rgb=tuple(values[5:8]),
        )


@dataclass(frozen=True)
class RenderedFace:
    image: np.ndarray  # (3, H, W) float32 in [-1, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    id_params: IdentityParams
    attr_params: AttributeParams


def _check_range(name: str, value: float, lo: float, hi: float) -> None:
    if not lo <= value <= hi:
        raise ValueError(f"{name}={value} outside [{lo}, {hi}]")


def _validate_params(idp: IdentityParams, attr: AttributeParams) -> None:
    _check_range("face_aspect", idp.face_aspect, *IDENTITY_RANGES["face_aspect"])
    for v in idp.skin_rgb:
        _check_range("skin_rgb", v, *IDENTITY_RANGES["skin_rgb"])
    _check_range("eye_spacing", idp.eye_spacing, *IDENTITY_RANGES["eye_spacing"])
    for v in idp.eye_rgb:
        _check_range("eye_rgb", v, *IDENTITY_RANGES["eye_rgb"])
    _check_range("nose_len", idp.nose_len, *IDENTITY_RANGES["nose_len"])
    for field in ("yaw", "roll", "pitch", "mouth_curve", "brightness_grad"):
        _check_range(field, getattr(attr, field), *ATTRIBUTE_RANGES[field])
    for v in attr.bg_rgb:
        _check_range("bg_rgb", v, *ATTRIBUTE_RANGES["bg_rgb"])


def _coverage(signed_dist_px: np.ndarray, softness: float = 0.8) -> np.ndarray:
    """Anti-aliased coverage from a signed distance in pixels (negative = inside)."""
    return np.clip(0.5 - signed_dist_px / (2.0 * softness), 0.0, 1.0)


def render_face(
    id_params: IdentityParams, attr_params: AttributeParams, resolution: int = 64
) -> RenderedFace:
    """Rasterize one face. Pure function of its arguments."""
    _validate_params(id_params, attr_params)
    r = resolution
    c = (r - 1) / 2.0
    ys, xs = np.mgrid[0:r, 0:r].astype(np.float64)
    dx, dy = xs - c, ys - c

    # rotate into the face frame (roll)
    cos_r, sin_r = np.cos(attr_params.roll), np.sin(attr_params.roll)
    xr = cos_r * dx + sin_r * dy
    yr = -sin_r * dx + cos_r * dy

    b_ax = 0.36 * r
    a_ax = b_ax * id_params.face_aspect
    u = xr / a_ax
    v = yr / b_ax
    e = np.sqrt(u**2 + v**2) + 1e-12
    face_sd = (e - 1.0) * min(a_ax, b_ax)  # approx signed distance in px
    face_cov = _coverage(face_sd)
    mask = (e <= 1.0).astype(np.uint8)

    img = np.empty((r, r, 3), dtype=np.float64)
    img[:] = np.asarray(attr_params.bg_rgb)
    skin = np.asarray(id_params.skin_rgb)
    # head-turn shading: the side the face turns away from darkens with yaw
    turn_shade = 1.0 + 0.35 * attr_params.yaw * np.clip(u, -1.0, 1.0)
    shaded_skin = np.clip(skin * turn_shade[..., None], 0.0, 1.0)
    img = img * (1 - face_cov[..., None]) + shaded_skin * face_cov[..., None]

    fx = attr_params.yaw * 0.5  # yaw shifts features horizontally (ellipse units)

    def paint(cov: np.ndarray, color: np.ndarray) -> None:
        nonlocal img
        cov = cov * face_cov  # features never bleed outside the face
        img = img * (1 - cov[..., None]) + color * cov[..., None]

    # eyes: two discs above center
    eye_r_px = 0.10 * b_ax
    for side in (-1.0, 1.0):
        eu = side * id_params.eye_spacing + fx
        ev = -0.35
        d = np.sqrt((u - eu) ** 2 * a_ax**2 + (v - ev) ** 2 * b_ax**2) - eye_r_px
        paint(_coverage(d), np.asarray(id_params.eye_rgb))

    # nose: vertical bar, pitch shifts it vertically
    nose_color = skin * 0.55
    nv0 = -0.10 + attr_params.pitch * 0.3
    nv1 = nv0 + id_params.nose_len
    half_w_px = 0.035 * a_ax + 0.7
    du = np.abs(u - fx) * a_ax - half_w_px
    dv = np.maximum(nv0 - v, v - nv1) * b_ax
    nose_sd = np.maximum(du, dv)
    paint(_coverage(nose_sd), nose_color)

    # mouth: parabolic arc, curvature is the expression parameter
    mouth_color = np.array([0.55, 0.15, 0.15])
    mu = (u - fx) / 0.30
    curve_v = 0.5 + attr_params.mouth_curve * 0.12 * (mu**2 - 0.5)
    m_sd = np.abs(v - curve_v) * b_ax - (0.035 * b_ax + 0.7)
    m_sd = np.maximum(m_sd, (np.abs(mu) - 1.0) * 0.30 * a_ax)
    paint(_coverage(m_sd), mouth_color)

    # multiplicative horizontal brightness gradient (lighting)
    grad = 1.0 + attr_params.brightness_grad * (xs / (r - 1) * 2.0 - 1.0)
    img = np.clip(img * grad[..., None], 0.0, 1.0)

    quant = np.round(img * 255.0).astype(np.uint8)
    normalized = quant.astype(np.float32) / 255.0 * 2.0 - 1.0
    return RenderedFace(
        image=np.ascontiguousarray(normalized.transpose(2, 0, 1)),
        mask=mask,
        id_params=id_params,
        attr_params=attr_params,
    )


def sample_identity(rng: np.random.Generator, identity_id: int) -> IdentityParams:
    lo, hi = IDENTITY_RANGES["face_aspect"]
    s_lo, s_hi = IDENTITY_RANGES["skin_rgb"]
    e_lo, e_hi = IDENTITY_RANGES["eye_spacing"]
    c_lo, c_hi = IDENTITY_RANGES["eye_rgb"]
    n_lo, n_hi = IDENTITY_RANGES["nose_len"]
    return IdentityParams(
        face_aspect=float(rng.uniform(lo, hi)),
        skin_rgb=tuple(float(x) for x in rng.uniform(s_lo, s_hi, 3)),
        eye_spacing=float(rng.uniform(e_lo, e_hi)),
        eye_rgb=tuple(float(x) for x in rng.uniform(c_lo, c_hi, 3)),
        nose_len=float(rng.uniform(n_lo, n_hi)),
        identity_id=identity_id,
    )


def sample_attributes(rng: np.random.Generator) -> AttributeParams:
    vals = {k: float(rng.uniform(*ATTRIBUTE_RANGES[k])) for k in ATTRIBUTE_FIELDS}
    bg = tuple(float(x) for x in rng.uniform(*ATTRIBUTE_RANGES["bg_rgb"], 3))
    return AttributeParams(bg_rgb=bg, **vals)


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    mask_path: str
    identity_id: int
    id_params: list[float]
    attr_params: list[float]
    sha256: str

    def identity(self) -> IdentityParams:
        return IdentityParams.from_flat(self.id_params, self.identity_id)

    def attributes(self) -> AttributeParams:
        return AttributeParams.from_flat(self.attr_params)


def _record_line(rec: ManifestRecord) -> str:
    return json.dumps(asdict(rec), sort_keys=True)


def image_sha256(image_u8: np.ndarray) -> str:
    return hashlib.sha256(image_u8.tobytes()).hexdigest()


def to_uint8(image: np.ndarray) -> np.ndarray:
    """(3, H, W) float32 in [-1, 1] -> (H, W, 3) uint8."""
    return np.round((image.transpose(1, 2, 0) + 1.0) / 2.0 * 255.0).astype(np.uint8)


def save_render(face: RenderedFace, image_path: Path, mask_path: Path) -> str:
    u8 = to_uint8(face.image)
    Image.fromarray(u8).save(image_path)
    Image.fromarray(face.mask * 255).save(mask_path)
    return image_sha256(u8)


def load_image(path: str | Path) -> np.ndarray:
    """PNG -> (3, H, W) float32 in [-1, 1]."""
    u8 = np.asarray(Image.open(path).convert("RGB"))
    return np.ascontiguousarray((u8.astype(np.float32) / 255.0 * 2.0 - 1.0).transpose(2, 0, 1))


def load_mask(path: str | Path) -> np.ndarray:
    u8 = np.asarray(Image.open(path).convert("L"))
    return (u8 > 127).astype(np.uint8)


def build_dataset(
    out_dir: str | Path,
    n_identities: int,
    renders_per_identity: int,
    seed: int,
    resolution: int = 64,
) -> Path:
    """Render the corpus and write a line-delimited manifest; returns its path."""
    if n_identities < 2:
        raise ValueError("need at least 2 identities")
    if renders_per_identity < 2:
        raise ValueError("need at least 2 renders per identity so same-identity pairs exist")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    rng = np.random.default_rng(seed)
    records = []
    for ident in range(n_identities):
        idp = sample_identity(rng, ident)
        for k in range(renders_per_identity):
            attr = sample_attributes(rng)
            face = render_face(idp, attr, resolution)
            stem = f"i{ident:04d}_r{k:03d}"
            img_path = out / f"{stem}.png"
            mask_path = out / f"{stem}.mask.png"
            try:
                digest = save_render(face, img_path, mask_path)
            except OSError as exc:
                raise OSError(f"failed writing {img_path}: {exc}") from exc
            # sidecar with generating params so single-image tools (swap CLI)
            # can recover pose without the manifest
            (out / f"{stem}.json").write_text(
                json.dumps(
                    {"identity_id": ident, **{k: getattr(attr, k) for k in ATTRIBUTE_FIELDS}},
                    sort_keys=True,
                )
            )
            records.append(
                ManifestRecord(
                    path=img_path.name,
                    mask_path=mask_path.name,
                    identity_id=ident,
                    id_params=idp.flat(),
                    attr_params=attr.flat(),
                    sha256=digest,
                )
            )
    manifest = out / "manifest.jsonl"
    manifest.write_text("".join(_record_line(r) + "\n" for r in records))
    return manifest


def load_manifest(path: str | Path) -> list[ManifestRecord]:
    records = []
    for line in Path(path).read_text().splitlines():
        obj = json.loads(line)
        records.append(ManifestRecord(**obj))
    return records


def records_by_identity(records: list[ManifestRecord]) -> dict[int, list[ManifestRecord]]:
    grouped: dict[int, list[ManifestRecord]] = {}
    for rec in records:
        grouped.setdefault(rec.identity_id, []).append(rec)
    return grouped


def make_pair(
    grouped: dict[int, list[ManifestRecord]], identity_id: int, rng: np.random.Generator
) -> tuple[ManifestRecord, ManifestRecord]:
    """Two distinct renders of the same identity (source, target)."""
    group = grouped.get(identity_id, [])
    if len(group) < 2:
        raise ValueError(f"identity {identity_id} has {len(group)} renders; need >= 2")
    i, j = rng.choice(len(group), size=2, replace=False)
    return group[int(i)], group[int(j)]


def make_swap_pair(
    records: list[ManifestRecord], rng: np.random.Generator
) -> tuple[ManifestRecord, ManifestRecord]:
    """Two renders of distinct identities (source, target)."""
    while True:
        i, j = rng.integers(0, len(records), size=2)
        if records[int(i)].identity_id != records[int(j)].identity_id:
            return records[int(i)], records[int(j)]
