"""
On-disk formats: datasets, model checkpoints, images and reports.

Datasets and checkpoints share one container layout:

    magic (8 bytes) | header length (uint32 LE) | JSON header | sections

The header lists every section as `{name, dtype, shape}` in file order;
sections are raw little-endian arrays. Complex arrays are stored as a
trailing real/imaginary axis.
"""
import csv
import dataclasses
import json
import logging
import struct
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import imageio.v2 as imageio
import numpy as np

from nikrecon.ico import ICoKernel
from nikrecon.nik import FourierEncoding, NIKModel
from nikrecon.simulator import CoilMaps, DatasetMeta, KSpaceDataset
from nikrecon.utils import DataError, JsonEncoder

LOG = logging.getLogger(__name__)

DATASET_MAGIC = b"NIKDSET\x00"
CHECKPOINT_MAGIC = b"NIKCKPT\x00"
DATASET_VERSION = 1
CHECKPOINT_VERSION = 1


class InvalidDatasetFile(DataError):
    """
    Raised when a dataset or checkpoint file is corrupt or has an invalid format.
    """


def _interleave(a: np.ndarray, dtype: str) -> np.ndarray:
    return np.stack([a.real, a.imag], axis=-1).astype(dtype)


def _deinterleave(a: np.ndarray) -> np.ndarray:
    return a[..., 0] + 1j * a[..., 1]


def _write_container(
    path: Path, magic: bytes, header: Dict[str, Any], sections: Mapping[str, np.ndarray]
) -> None:
    header = dict(header)
    header["sections"] = [
        {"name": name, "dtype": array.dtype.newbyteorder("<").str, "shape": list(array.shape)}
        for name, array in sections.items()
    ]
    encoded = json.dumps(header, sort_keys=True, cls=JsonEncoder).encode("utf-8")

    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<I", len(encoded)))
        f.write(encoded)
        for array in sections.values():
            f.write(np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<")).tobytes())


def _read_container(path: Path, magic: bytes) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        blob = f.read()

    if blob[: len(magic)] != magic:
        raise InvalidDatasetFile(f"{path}: unrecognised magic bytes")

    offset = len(magic)
    try:
        (length,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        header = json.loads(blob[offset : offset + length].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InvalidDatasetFile(f"{path}: unreadable header") from exc
    offset += length

    sections = {}
    try:
        for section in header["sections"]:
            dtype = np.dtype(section["dtype"])
            shape = tuple(section["shape"])
            size = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
            if offset + size > len(blob):
                raise InvalidDatasetFile(f"{path}: section {section['name']} is truncated")
            sections[section["name"]] = (
                np.frombuffer(blob, dtype=dtype, count=size // dtype.itemsize, offset=offset)
                .reshape(shape)
                .astype(dtype.newbyteorder("="))
            )
            offset += size
    except (KeyError, TypeError) as exc:
        raise InvalidDatasetFile(f"{path}: missing property in header: {exc}")

    if offset != len(blob):
        raise InvalidDatasetFile(f"{path}: {len(blob) - offset} trailing bytes")

    return header, sections


def save_dataset(ds: KSpaceDataset, path: Path) -> None:
    meta = ds.meta
    header = {
        "version": DATASET_VERSION,
        "created": datetime.now(timezone.utc),
        "n_spokes": meta.n_spokes,
        "n_fe": meta.n_fe,
        "n_coils": meta.n_coils,
        "height": meta.height,
        "width": meta.width,
        "noise_std": meta.noise_std,
        "provenance": meta.provenance,
    }
    sections = {
        "coords": ds.coords.astype("<f8"),
        "values": _interleave(ds.values, "<f4"),
        "spoke_ids": ds.spoke_ids.astype("<i8"),
    }
    if meta.true_nav is not None:
        sections["true_nav"] = np.asarray(meta.true_nav, dtype="<f8")
    if ds.coils is not None:
        sections["coil_maps"] = _interleave(ds.coils.maps, "<f8")

    _write_container(path, DATASET_MAGIC, header, sections)
    LOG.info(f"Wrote dataset with {meta.n_spokes} spokes to {path}")


def load_dataset(path: Path) -> KSpaceDataset:
    header, sections = _read_container(path, DATASET_MAGIC)

    try:
        version = header["version"]
        if version != DATASET_VERSION:
            raise InvalidDatasetFile(f"{path}: unsupported dataset version {version}")

        meta = DatasetMeta(
            n_spokes=header["n_spokes"],
            n_fe=header["n_fe"],
            n_coils=header["n_coils"],
            height=header["height"],
            width=header["width"],
            noise_std=header.get("noise_std", 0.0),
            provenance=header.get("provenance", "unknown"),
            true_nav=sections.get("true_nav"),
            spoke_ids=sections["spoke_ids"],
        )
        values = _deinterleave(sections["values"]).astype(np.complex64)
        coords = sections["coords"]

    except KeyError as exc:
        raise InvalidDatasetFile(f"{path}: missing property: {exc}")

    coils = None
    if "coil_maps" in sections:
        coils = CoilMaps(maps=_deinterleave(sections["coil_maps"]))

    return KSpaceDataset(coords=coords, values=values, meta=meta, coils=coils)


def dataset_summary(ds: KSpaceDataset) -> Dict[str, Any]:
    meta = ds.meta
    summary = {
        "spokes": meta.n_spokes,
        "samples per spoke": meta.n_fe,
        "coils": meta.n_coils,
        "grid": f"{meta.height}x{meta.width}",
        "noise std": meta.noise_std,
        "provenance": meta.provenance,
    }
    if meta.true_nav is not None:
        summary["true nav range"] = f"[{meta.true_nav.min():.3f}, {meta.true_nav.max():.3f}]"
    return summary


@dataclasses.dataclass(frozen=True)
class Checkpoint:
    nik: NIKModel
    coils: Optional[CoilMaps] = None
    ico: Optional[ICoKernel] = None
    extra: Dict[str, Any] = dataclasses.field(default_factory=dict)

    @property
    def kind(self) -> str:
        return "iconik" if self.ico is not None else "nik"


def save_checkpoint(ckpt: Checkpoint, path: Path) -> None:
    """
    Writes NIK parameters as float32, plus coil maps and ICo layers when
    present.
    """
    nik = ckpt.nik
    header = {
        "version": CHECKPOINT_VERSION,
        "kind": ckpt.kind,
        "n_coils": nik.n_coils,
        "activation": nik.activation,
        "value_scale": nik.value_scale,
        "nav_range": list(nik.nav_range),
        "encoding_scales": list(nik.encoding.scales),
        "n_layers": len(nik.weights),
        "step_count": nik.step_count,
        "best_loss": nik.best_loss,
        "fingerprint": nik.fingerprint(),
        "extra": ckpt.extra,
    }

    sections = {"frequencies": nik.encoding.frequencies.astype("<f4")}
    for i, (w, b) in enumerate(zip(nik.weights, nik.biases)):
        sections[f"nik.w{i}"] = w.astype("<f4")
        sections[f"nik.b{i}"] = b.astype("<f4")

    if ckpt.coils is not None:
        sections["coil_maps"] = _interleave(ckpt.coils.maps, "<f8")

    if ckpt.ico is not None:
        for i, (w, b) in enumerate(zip(ckpt.ico.weights, ckpt.ico.biases)):
            sections[f"ico.w{i}"] = _interleave(w, "<f8")
            sections[f"ico.b{i}"] = _interleave(b, "<f8")

    _write_container(path, CHECKPOINT_MAGIC, header, sections)
    LOG.info(f"Wrote {ckpt.kind} checkpoint to {path}")


def load_checkpoint(path: Path) -> Checkpoint:
    header, sections = _read_container(path, CHECKPOINT_MAGIC)

    try:
        version = header["version"]
        if version != CHECKPOINT_VERSION:
            raise InvalidDatasetFile(f"{path}: unsupported checkpoint version {version}")

        n_layers = header["n_layers"]
        encoding = FourierEncoding(
            frequencies=sections["frequencies"].astype(np.float64),
            scales=tuple(header["encoding_scales"]),
        )
        nik = NIKModel(
            encoding=encoding,
            weights=tuple(sections[f"nik.w{i}"].astype(np.float64) for i in range(n_layers)),
            biases=tuple(sections[f"nik.b{i}"].astype(np.float64) for i in range(n_layers)),
            n_coils=header["n_coils"],
            activation=header["activation"],
            value_scale=header["value_scale"],
            nav_range=tuple(header["nav_range"]),
            step_count=header.get("step_count", 0),
            best_loss=header.get("best_loss", float("inf")),
        )

        ico = None
        if header["kind"] == "iconik":
            ico = ICoKernel(
                weights=tuple(_deinterleave(sections[f"ico.w{i}"]) for i in range(3)),
                biases=tuple(_deinterleave(sections[f"ico.b{i}"]) for i in range(3)),
            )
    except KeyError as exc:
        raise InvalidDatasetFile(f"{path}: missing property: {exc}")

    expected = header.get("fingerprint")
    if expected is not None and nik.fingerprint() != expected:
        raise InvalidDatasetFile(f"{path}: NIK parameters do not match the stored fingerprint")

    coils = None
    if "coil_maps" in sections:
        coils = CoilMaps(maps=_deinterleave(sections["coil_maps"]))

    return Checkpoint(nik=nik, coils=coils, ico=ico, extra=header.get("extra", {}))


def magnitude_window(images: Sequence[np.ndarray], percentile: float = 99.5) -> float:
    """
    Upper display bound shared by all `images`.
    """
    magnitudes = np.concatenate([np.abs(np.asarray(img)).ravel() for img in images])
    window = float(np.percentile(magnitudes, percentile))
    return window if window > 0 else 1.0


def write_png(image: np.ndarray, path: Path, window: Optional[float] = None) -> float:
    """
    Writes `|image|` as a 16-bit grayscale PNG clipped to `[0, window]`.

    Returns:
        float: the window used.
    """
    if window is None:
        window = magnitude_window([image])

    scaled = np.clip(np.abs(image) / window, 0.0, 1.0)
    imageio.imwrite(path, np.round(scaled * 65535).astype(np.uint16))
    return window


def write_complex(array: np.ndarray, path: Path) -> None:
    np.save(path, np.asarray(array, dtype=np.complex128))


def read_complex(path: Path) -> np.ndarray:
    try:
        return np.load(path)
    except ValueError as exc:
        raise InvalidDatasetFile(f"{path}: not a numpy array file") from exc


def write_csv(rows: List[Mapping[str, Any]], path: Path, fields: Optional[Sequence[str]] = None) -> None:
    fields = list(fields or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def write_json(data: Any, path: Path) -> None:
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True, cls=JsonEncoder)
        f.write("\n")


def read_json(path: Path) -> Any:
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise InvalidDatasetFile(f"{path}: invalid JSON data") from exc
