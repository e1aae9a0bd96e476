"""Dataset directories and the FSC-147-style annotation adapter.

A dataset directory holds ``manifest.json``::

    {"format": "promptcount-dataset", "version": 1,
     "scenes": [{"scene_id": 0, "image": "scene_00000.ppm",
                 "annotation": "scene_00000.json" | null,
                 "samples": [{"prompt_type": "box", "class_name": "pea",
                              "class_id": 1, "prompt": "box:...",
                              "scene_classes": ["pea", "bead"],
                              "mask": "scene_00000_box.pmask",
                              "density": "scene_00000_box.pdm"}, ...]}],
     "sha256": {"<file>": "<hex digest>", ...}}

Images are P6 pixmaps, masks PMASK text, densities PDM1 and annotations
JSON records.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .formats import FormatError, read_pdm, read_pmask, read_ppm, write_pdm, write_pmask, write_ppm
from .synth import SceneAnnotation, TrainingSample

FORMAT = "promptcount-dataset"
VERSION = 1


class DatasetError(RuntimeError):
    pass


@dataclass
class Dataset:
    samples: List[TrainingSample] = field(default_factory=list)
    annotations: Dict[int, SceneAnnotation] = field(default_factory=dict)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def annotation_to_dict(ann: SceneAnnotation) -> dict:
    return {
        "class_names": list(ann.class_names),
        "points": {k: [list(p) for p in v] for k, v in ann.points.items()},
        "boxes": {k: (list(v) if v is not None else None) for k, v in ann.boxes.items()},
        "image_size": list(ann.image_size),
    }


def annotation_from_dict(d: dict) -> SceneAnnotation:
    return SceneAnnotation(
        list(d["class_names"]),
        {k: [tuple(p) for p in v] for k, v in d["points"].items()},
        {k: (tuple(v) if v is not None else None) for k, v in d["boxes"].items()},
        tuple(d["image_size"]),
    )


def save_dataset(dataset: Dataset, directory) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    scenes: Dict[int, dict] = {}
    written: List[str] = []

    for s in dataset.samples:
        stem = f"scene_{s.scene_id:05d}"
        scene = scenes.get(s.scene_id)
        if scene is None:
            write_ppm(s.image, out / f"{stem}.ppm")
            written.append(f"{stem}.ppm")
            ann_name = None
            if s.scene_id in dataset.annotations:
                ann_name = f"{stem}.json"
                (out / ann_name).write_text(
                    json.dumps(annotation_to_dict(dataset.annotations[s.scene_id]), indent=1))
                written.append(ann_name)
            scene = scenes[s.scene_id] = {"scene_id": s.scene_id, "image": f"{stem}.ppm",
                                          "annotation": ann_name, "samples": []}
        tag = f"{stem}_{s.prompt_type}_{len(scene['samples'])}"
        write_pmask(s.mask, out / f"{tag}.pmask")
        write_pdm(s.density, out / f"{tag}.pdm")
        written += [f"{tag}.pmask", f"{tag}.pdm"]
        scene["samples"].append({
            "prompt_type": s.prompt_type, "class_name": s.class_name, "class_id": s.class_id,
            "prompt": s.prompt, "scene_classes": list(s.scene_classes),
            "mask": f"{tag}.pmask", "density": f"{tag}.pdm",
        })

    for scene_id, ann in dataset.annotations.items():
        if scene_id not in scenes:
            raise DatasetError(f"annotation for scene {scene_id} has no samples")

    manifest = {"format": FORMAT, "version": VERSION, "scenes": list(scenes.values()),
                "sha256": {name: _sha256(out / name) for name in written}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out


def load_dataset(directory) -> Dataset:
    root = Path(directory)
    path = root / "manifest.json"
    if not path.exists():
        raise DatasetError(f"{path}: missing manifest")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != FORMAT:
        raise DatasetError(f"{path}: not a {FORMAT} manifest")
    if manifest.get("version") != VERSION:
        raise DatasetError(f"{path}: unsupported version {manifest.get('version')!r}")
    digests = manifest.get("sha256", {})

    def checked(name: str) -> Path:
        p = root / name
        if not p.exists():
            raise DatasetError(f"{p}: missing file")
        if name not in digests:
            raise DatasetError(f"{p}: no checksum recorded")
        if _sha256(p) != digests[name]:
            raise DatasetError(f"{p}: checksum mismatch")
        return p

    ds = Dataset()
    for scene in manifest["scenes"]:
        image = read_ppm(checked(scene["image"]))
        sid = int(scene["scene_id"])
        if scene.get("annotation"):
            ds.annotations[sid] = annotation_from_dict(
                json.loads(checked(scene["annotation"]).read_text()))
        for rec in scene["samples"]:
            ds.samples.append(TrainingSample(
                image=image,
                mask=read_pmask(checked(rec["mask"]), np.float32),
                density=read_pdm(checked(rec["density"])),
                class_name=rec["class_name"], class_id=int(rec["class_id"]),
                prompt_type=rec["prompt_type"], prompt=rec["prompt"], scene_id=sid,
                scene_classes=tuple(rec["scene_classes"]),
            ))
    return ds


# ---------------------------------------------------------------------------
# FSC-147-style annotations
# ---------------------------------------------------------------------------


def load_fsc_annotations(manifest_path, exemplar: int = 0) -> List[Tuple[str, SceneAnnotation]]:
    """Parse a JSON-lines manifest of externally converted FSC-147 / CARPK labels.

    One object per line with keys ``image`` (path), ``class`` (name),
    ``width``, ``height``, ``points`` (``[[x, y], ...]``) and ``boxes``
    (1 to 3 ``[x0, y0, x1, y1]``). ``exemplar`` picks the box used as the
    prompt (the first by default).
    """
    records = []
    with open(manifest_path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{manifest_path}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{where}: invalid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise FormatError(f"{where}: record must be an object")
            for key in ("image", "class", "width", "height", "points", "boxes"):
                if key not in rec:
                    raise FormatError(f"{where}: missing field '{key}'")
            W, H = rec["width"], rec["height"]
            if not (isinstance(W, int) and isinstance(H, int) and W > 0 and H > 0):
                raise FormatError(f"{where}: field 'width'/'height' must be positive integers")

            points = []
            for k, p in enumerate(rec["points"]):
                if not (isinstance(p, (list, tuple)) and len(p) == 2):
                    raise FormatError(f"{where}: field 'points'[{k}] must be [x, y]")
                x, y = float(p[0]), float(p[1])
                if not (0 <= x <= W and 0 <= y <= H):
                    raise FormatError(f"{where}: field 'points'[{k}] = {p} outside {W}x{H} image")
                points.append((x, y))

            boxes = rec["boxes"]
            if not 1 <= len(boxes) <= 3:
                raise FormatError(f"{where}: field 'boxes' needs 1 to 3 exemplar boxes")
            for k, b in enumerate(boxes):
                if not (isinstance(b, (list, tuple)) and len(b) == 4):
                    raise FormatError(f"{where}: field 'boxes'[{k}] must be [x0, y0, x1, y1]")
                x0, y0, x1, y1 = map(float, b)
                if not (0 <= x0 < x1 <= W and 0 <= y0 < y1 <= H):
                    raise FormatError(f"{where}: field 'boxes'[{k}] = {b} invalid for {W}x{H} image")
            if not 0 <= exemplar < len(boxes):
                raise FormatError(f"{where}: exemplar index {exemplar} out of range")

            name = str(rec["class"])
            ann = SceneAnnotation([name], {name: points},
                                  {name: tuple(float(v) for v in boxes[exemplar])}, (H, W))
            records.append((str(rec["image"]), ann))
    return records
