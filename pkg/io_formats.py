"""
File formats.

Sequences, checkpoints and pose sequences share one container: a line-oriented
key=value text header followed by a little-endian binary payload.

    format=egopose
    kind=sequence
    schema_version=1
    meta.frames=196
    block.points=<f4:196x100x3
    checksum=sha256:<hex digest of the payload>
    end_header
    <payload blocks in declared order>

Point clouds also export to ASCII PLY with an integer label property, and
registrations to CSV.
"""
import csv
import hashlib
import logging
import os
from pathlib import Path

import numpy as np

from errors import (ChecksumError, SchemaVersionError, SequenceFormatError, ShapeError, SkeletonMismatchError,
                    TruncatedFileError)
from sensor_sim import SequenceSample

log = logging.getLogger(__name__)

FORMAT = "egopose"
SCHEMA_VERSION = 1
END = b"end_header\n"


def _shape_text(shape):
    return "x".join(str(d) for d in shape) if shape else "-"


def _parse_shape(text):
    return () if text == "-" else tuple(int(d) for d in text.split("x"))


def save_container(path, kind, meta, blocks):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"format={FORMAT}", f"kind={kind}", f"schema_version={SCHEMA_VERSION}"]
    for key, value in meta.items():
        text = str(value)
        if "\n" in text or "=" in key:
            raise SequenceFormatError(f"meta entry {key!r} cannot be written to a header")
        lines.append(f"meta.{key}={text}")
    chunks = []
    for name, array in blocks.items():
        array = np.asarray(array)
        array = array.astype(array.dtype.newbyteorder("<"), copy=False)
        lines.append(f"block.{name}={array.dtype.str}:{_shape_text(array.shape)}")
        chunks.append(np.ascontiguousarray(array).tobytes())
    payload = b"".join(chunks)
    lines.append(f"checksum=sha256:{hashlib.sha256(payload).hexdigest()}")
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("utf-8"))
        f.write(END)
        f.write(payload)


def load_container(path, kind=None):
    """Returns (meta, blocks) after validating format, version, sizes and checksum."""
    with open(path, "rb") as f:
        raw = f.read()
    cut = raw.find(END)
    if cut < 0:
        raise TruncatedFileError(f"{path}: header is incomplete")
    header = raw[:cut].decode("utf-8").splitlines()
    payload = raw[cut + len(END):]

    fields = {}
    meta = {}
    declared = []
    for line in header:
        key, sep, value = line.partition("=")
        if not sep:
            raise SequenceFormatError(f"{path}: malformed header line {line!r}")
        if key.startswith("meta."):
            meta[key[5:]] = value
        elif key.startswith("block."):
            dtype, _, shape = value.partition(":")
            declared.append((key[6:], np.dtype(dtype), _parse_shape(shape)))
        else:
            fields[key] = value

    if fields.get("format") != FORMAT:
        raise SequenceFormatError(f"{path}: not an {FORMAT} file")
    if fields.get("schema_version") != str(SCHEMA_VERSION):
        raise SchemaVersionError(f"{path}: schema version {fields.get('schema_version')} is not supported")
    if kind is not None and fields.get("kind") != kind:
        raise SequenceFormatError(f"{path}: expected a {kind} file, found {fields.get('kind')}")

    expected = sum(int(np.prod(shape)) * dtype.itemsize for _, dtype, shape in declared)
    if len(payload) < expected:
        raise TruncatedFileError(f"{path}: payload has {len(payload)} bytes, header declares {expected}")
    if len(payload) > expected:
        raise SequenceFormatError(f"{path}: {len(payload) - expected} unexpected trailing bytes")
    digest = fields.get("checksum", "")
    if digest != f"sha256:{hashlib.sha256(payload).hexdigest()}":
        raise ChecksumError(f"{path}: payload checksum mismatch")

    blocks = {}
    offset = 0
    for name, dtype, shape in declared:
        size = int(np.prod(shape)) * dtype.itemsize
        blocks[name] = np.frombuffer(payload[offset:offset + size], dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        offset += size
    return meta, blocks


# sequences

def save_sequence(path, sample):
    blocks = {
        "three_point": sample.three_point,
        "points": sample.points,
        "sensor_origin": sample.sensor_origin,
        "view_axis": sample.view_axis,
        "empty": sample.empty,
        "synthesis": sample.synthesis,
    }
    if sample.labels is not None:
        blocks["labels"] = sample.labels
    if sample.gt_rot is not None:
        blocks["gt_rot"] = sample.gt_rot
        blocks["gt_root_pos"] = sample.gt_root_pos
    meta = {
        "name": sample.name,
        "frames": sample.frames,
        "points": sample.points.shape[1],
        "joints": sample.synthesis.shape[2],
        "fps": sample.fps,
        "domain_tag": sample.domain_tag,
        "protocol": sample.protocol,
        "seed": sample.seed,
        "body_scale": repr(float(sample.body_scale)),
        "samples": sample.synthesis.shape[0],
    }
    save_container(path, "sequence", meta, blocks)


def load_sequence(path):
    meta, blocks = load_container(path, kind="sequence")
    try:
        N, P, J = int(meta["frames"]), int(meta["points"]), int(meta["joints"])
        sample = SequenceSample(
            name=meta["name"],
            three_point=blocks["three_point"],
            points=blocks["points"],
            labels=blocks.get("labels"),
            sensor_origin=blocks["sensor_origin"],
            view_axis=blocks["view_axis"],
            empty=blocks["empty"],
            synthesis=blocks["synthesis"],
            gt_rot=blocks.get("gt_rot"),
            gt_root_pos=blocks.get("gt_root_pos"),
            domain_tag=meta["domain_tag"],
            protocol=meta["protocol"],
            fps=int(meta["fps"]),
            seed=int(meta["seed"]),
            body_scale=float(meta["body_scale"]),
        )
    except KeyError as exc:
        raise SequenceFormatError(f"{path}: missing entry {exc}") from None
    if sample.points.shape != (N, P, 3) or sample.synthesis.shape[1:] != (N, J, 6):
        raise ShapeError("load_sequence", sample.points.shape, (N, P, 3))
    return sample


def load_sequences(directory):
    paths = sorted(Path(directory).glob("*.seq"))
    return [load_sequence(p) for p in paths]


# checkpoints

def save_checkpoint(path, params, meta):
    arrays = params.arrays() if hasattr(params, "arrays") else dict(params)
    save_container(path, "checkpoint", meta, {name: a.astype(np.float32) for name, a in arrays.items()})
    log.info("Saved checkpoint %s (%d tensors)", path, len(arrays))


def load_checkpoint(path):
    meta, blocks = load_container(path, kind="checkpoint")
    return blocks, meta


# pose sequences for third-party synthesis interop

def export_pose_sequence(path, rot6d, meta=None):
    rot6d = np.asarray(rot6d, dtype=np.float32)
    if rot6d.ndim != 3 or rot6d.shape[-1] != 6:
        raise ShapeError("export_pose_sequence", rot6d.shape, (None, None, 6))
    info = {"frames": rot6d.shape[0], "joints": rot6d.shape[1]}
    info.update(meta or {})
    save_container(path, "pose", info, {"local_rot": rot6d})


def import_pose_sequence(path, J=None):
    meta, blocks = load_container(path, kind="pose")
    rot = blocks.get("local_rot")
    if rot is None:
        raise SequenceFormatError(f"{path}: no local_rot block")
    if J is not None and rot.shape[1] != J:
        raise SkeletonMismatchError(f"{path}: pose has {rot.shape[1]} joints, skeleton has {J}")
    return rot


# viewers and tables

def export_ply(points, labels, path):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if labels is not None and len(labels) != len(points):
        raise ShapeError("export_ply", points.shape, np.shape(labels))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\ncomment egopose point cloud\n")
        f.write(f"element vertex {len(points)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        if labels is not None:
            f.write("property int label\n")
        f.write("end_header\n")
        for i, (x, y, z) in enumerate(points):
            if labels is None:
                f.write(f"{x:.6f} {y:.6f} {z:.6f}\n")
            else:
                f.write(f"{x:.6f} {y:.6f} {z:.6f} {int(labels[i])}\n")


def read_ply(path):
    """Parse an ASCII PLY written by `export_ply`. Returns (points, labels or None)."""
    with open(path, "r") as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != "ply":
        raise SequenceFormatError(f"{path}: not a PLY file")
    count = 0
    properties = []
    body = None
    for i, line in enumerate(lines[1:], start=1):
        if line.startswith("element vertex"):
            count = int(line.split()[2])
        elif line.startswith("property"):
            properties.append(line.split()[-1])
        elif line == "end_header":
            body = lines[i + 1:i + 1 + count]
            break
    if body is None or len(body) < count:
        raise TruncatedFileError(f"{path}: expected {count} vertices")
    values = np.array([row.split() for row in body], dtype=np.float64).reshape(count, len(properties))
    labels = values[:, properties.index("label")].astype(np.int64) if "label" in properties else None
    return values[:, :3], labels


def write_csv(path, rows, fieldnames):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def export_registration_csv(path, points, probs):
    """Per point: coordinates, argmax label and its probability."""
    probs = np.asarray(probs)
    points = np.asarray(points)
    labels = np.argmax(probs, axis=-1)
    rows = [
        {"index": i, "x": f"{p[0]:.6f}", "y": f"{p[1]:.6f}", "z": f"{p[2]:.6f}",
         "label": int(labels[i]), "prob": f"{probs[i, labels[i]]:.6f}"}
        for i, p in enumerate(points)
    ]
    write_csv(path, rows, ["index", "x", "y", "z", "label", "prob"])


def sequence_filename(directory, name):
    return os.path.join(directory, f"{name}.seq")
