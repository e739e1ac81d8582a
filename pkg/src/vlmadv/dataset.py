"""Dataset ingestion: JSONL records, image decoding, seeded subsetting.

Records live in JSONL (one object per line) and reference images by path,
relative to the record file's directory. Two image formats are decoded: PPM
P6 with maxval 255 (bytes mapped v/255) and single-tensor ADVT files (the
flat binary format used for toy weights). Subset draws use SplitMix64
partial Fisher-Yates in draw order, so a (seed, n) pair selects the same
records on any platform or implementation of the generator.

Converters from the official COCO caption and VQAv2 annotation layouts are
provided as functions (wired to CLI subcommands); they only rewrite
metadata, never image bytes, and never bundle data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import ImageTensor
from .metrics import NUM_ANNOTATORS
from .rng import SplitMix64
from .toys import load_weights_file

TASK_CAPTIONING = "captioning"
TASK_VQA = "vqa"
TASKS = (TASK_CAPTIONING, TASK_VQA)


class DatasetError(ValueError):
    """Validation failure; message carries the offending line when known."""


@dataclass(frozen=True)
class DatasetRecord:
    id: str
    task: str
    image_refs: tuple[str, ...]
    question: str | None = None
    answers: tuple[str, ...] | None = None
    references: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise DatasetError(f"record {self.id!r}: unknown task {self.task!r}")
        refs = tuple(str(p) for p in self.image_refs)
        if not refs:
            raise DatasetError(f"record {self.id!r}: needs at least one image")
        object.__setattr__(self, "image_refs", refs)
        if self.task == TASK_VQA:
            if not self.question:
                raise DatasetError(f"record {self.id!r}: vqa needs a question")
            if self.answers is None or len(self.answers) != NUM_ANNOTATORS:
                got = 0 if self.answers is None else len(self.answers)
                raise DatasetError(
                    f"record {self.id!r}: vqa needs {NUM_ANNOTATORS} answers, "
                    f"got {got}"
                )
            object.__setattr__(self, "answers",
                               tuple(str(a) for a in self.answers))
            if self.references is not None:
                raise DatasetError(
                    f"record {self.id!r}: vqa record cannot carry references"
                )
        else:
            if not self.references:
                raise DatasetError(
                    f"record {self.id!r}: captioning needs references"
                )
            object.__setattr__(self, "references",
                               tuple(str(r) for r in self.references))
            if self.question is not None or self.answers is not None:
                raise DatasetError(
                    f"record {self.id!r}: captioning record cannot carry "
                    "question/answers"
                )

    def to_json(self) -> dict:
        out: dict = {"id": self.id, "task": self.task,
                     "image_refs": list(self.image_refs)}
        if self.task == TASK_VQA:
            out["question"] = self.question
            out["answers"] = list(self.answers or ())
        else:
            out["references"] = list(self.references or ())
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetRecord":
        known = {"id", "task", "image_refs", "question", "answers",
                 "references"}
        extra = set(obj) - known
        if extra:
            raise DatasetError(f"unknown record fields {sorted(extra)}")
        try:
            rid, task = obj["id"], obj["task"]
            image_refs = tuple(obj["image_refs"])
        except KeyError as exc:
            raise DatasetError(f"record missing field {exc.args[0]!r}") from None
        return cls(
            id=str(rid),
            task=str(task),
            image_refs=image_refs,
            question=obj.get("question"),
            answers=tuple(obj["answers"]) if "answers" in obj else None,
            references=tuple(obj["references"]) if "references" in obj else None,
        )


@dataclass(frozen=True)
class Dataset:
    records: tuple[DatasetRecord, ...]
    base_dir: Path = field(compare=False, default=Path("."))
    provenance: dict = field(compare=False, default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "base_dir", Path(self.base_dir))
        seen = set()
        for rec in self.records:
            if rec.id in seen:
                raise DatasetError(f"duplicate record id {rec.id!r}")
            seen.add(rec.id)

    def __len__(self) -> int:
        return len(self.records)

    def resolve(self, ref: str) -> Path:
        p = Path(ref)
        return p if p.is_absolute() else self.base_dir / p

    def load_inputs(self, record: DatasetRecord) -> tuple[ImageTensor, ...]:
        return tuple(load_image(self.resolve(r)) for r in record.image_refs)


def load_dataset(path, check_images: bool = True) -> Dataset:
    """Parse and validate a JSONL record file.

    Validation failures name the 1-based line number. With check_images,
    every referenced image must exist relative to the record file.
    """
    path = Path(path)
    base = path.resolve().parent
    records = []
    for lineno, line in enumerate(
        path.read_text(encoding="utf-8").splitlines(), start=1
    ):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}:{lineno}: malformed JSON ({exc})") from None
        try:
            rec = DatasetRecord.from_json(obj)
        except DatasetError as exc:
            raise DatasetError(f"{path}:{lineno}: {exc}") from None
        if check_images:
            for ref in rec.image_refs:
                p = Path(ref)
                target = p if p.is_absolute() else base / p
                if not target.is_file():
                    raise DatasetError(
                        f"{path}:{lineno}: image file not found: {target}"
                    )
        records.append(rec)
    try:
        return Dataset(
            records=tuple(records),
            base_dir=base,
            provenance={"source": str(path), "record_count": len(records)},
        )
    except DatasetError as exc:
        raise DatasetError(f"{path}: {exc}") from None


def save_dataset(dataset: Dataset, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for rec in dataset.records:
            f.write(json.dumps(rec.to_json(), ensure_ascii=False) + "\n")


def sample_subset(dataset: Dataset, n: int, seed: int) -> Dataset:
    """Uniform without-replacement sample of min(n, size) records, draw order."""
    if n < 1:
        raise ValueError("subset size must be >= 1")
    k = min(n, len(dataset.records))
    if k == 0:
        return dataset
    idx = SplitMix64(seed).sample_indices(len(dataset.records), k)
    prov = dict(dataset.provenance)
    prov.update({"subset_seed": seed, "subset_size": k})
    return Dataset(
        records=tuple(dataset.records[i] for i in idx),
        base_dir=dataset.base_dir,
        provenance=prov,
    )


def _read_ppm_header(blob: bytes, path) -> tuple[int, int, int, int]:
    """Parse the P6 header; returns (width, height, maxval, raster offset)."""
    if blob[:2] != b"P6":
        kind = blob[:2].decode("ascii", "replace")
        raise DatasetError(f"{path}: unsupported image format {kind!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(blob):
            raise DatasetError(f"{path}: truncated PPM header")
        c = blob[pos]
        if c in b" \t\r\n":
            pos += 1
        elif c == ord("#"):
            while pos < len(blob) and blob[pos] not in b"\r\n":
                pos += 1
        elif c in b"0123456789":
            start = pos
            while pos < len(blob) and blob[pos] in b"0123456789":
                pos += 1
            fields.append(int(blob[start:pos]))
        else:
            raise DatasetError(f"{path}: bad PPM header byte {bytes([c])!r}")
    if pos >= len(blob) or blob[pos] not in b" \t\r\n":
        raise DatasetError(f"{path}: missing whitespace after PPM maxval")
    return fields[0], fields[1], fields[2], pos + 1


def load_image(path) -> ImageTensor:
    """Decode PPM P6 (maxval 255) or a single-tensor ADVT file to (C,H,W)."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] == b"ADVT":
        arrays = load_weights_file(path, expect_count=1)
        arr = arrays[0]
        if arr.ndim != 3:
            raise DatasetError(
                f"{path}: image tensor must be rank 3, got rank {arr.ndim}"
            )
        return ImageTensor(arr)
    width, height, maxval, offset = _read_ppm_header(blob, path)
    if maxval != 255:
        raise DatasetError(f"{path}: PPM maxval must be 255, got {maxval}")
    if width < 1 or height < 1:
        raise DatasetError(f"{path}: bad PPM dimensions {width}x{height}")
    need = 3 * width * height
    raster = blob[offset:offset + need]
    if len(raster) != need:
        raise DatasetError(
            f"{path}: truncated PPM raster ({len(raster)} of {need} bytes)"
        )
    arr = np.frombuffer(raster, dtype=np.uint8).astype(np.float64) / 255.0
    # interleaved RGB rows to (3, H, W)
    return ImageTensor(arr.reshape(height, width, 3).transpose(2, 0, 1))


def save_ppm(image: ImageTensor, path) -> None:
    """Write (3,H,W) values as PPM P6, rounding v*255 to nearest byte."""
    c, h, w = image.shape
    if c != 3:
        raise ValueError(f"PPM needs 3 channels, got {c}")
    raster = np.rint(image.data * 255.0).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(raster.transpose(1, 2, 0).tobytes())


def convert_coco_captions(annotation_file, image_dir: str,
                          image_ext: str = ".ppm") -> list[DatasetRecord]:
    """Records from the official COCO caption annotation layout.

    Image paths become {image_dir}/{file_name with image_ext}; images are
    expected to have been transcoded to PPM separately.
    """
    obj = json.loads(Path(annotation_file).read_text(encoding="utf-8"))
    names = {}
    for img in obj.get("images", []):
        stem = Path(str(img["file_name"])).stem
        names[img["id"]] = f"{image_dir}/{stem}{image_ext}"
    captions: dict = {}
    for ann in obj.get("annotations", []):
        captions.setdefault(ann["image_id"], []).append(str(ann["caption"]))
    records = []
    for image_id in sorted(captions):
        if image_id not in names:
            raise DatasetError(f"annotation references unknown image {image_id}")
        records.append(DatasetRecord(
            id=str(image_id),
            task=TASK_CAPTIONING,
            image_refs=(names[image_id],),
            references=tuple(captions[image_id]),
        ))
    return records


def convert_vqa(questions_file, annotations_file, image_dir: str,
                image_pattern: str = "{image_id:012d}.ppm") -> list[DatasetRecord]:
    """Records from the official VQAv2 question + annotation layout."""
    qobj = json.loads(Path(questions_file).read_text(encoding="utf-8"))
    aobj = json.loads(Path(annotations_file).read_text(encoding="utf-8"))
    questions = {q["question_id"]: q for q in qobj.get("questions", [])}
    records = []
    for ann in sorted(aobj.get("annotations", []),
                      key=lambda a: a["question_id"]):
        qid = ann["question_id"]
        if qid not in questions:
            raise DatasetError(f"annotation references unknown question {qid}")
        q = questions[qid]
        answers = tuple(str(a["answer"]) for a in ann["answers"])
        ref = f"{image_dir}/" + image_pattern.format(image_id=q["image_id"])
        records.append(DatasetRecord(
            id=str(qid),
            task=TASK_VQA,
            image_refs=(ref,),
            question=str(q["question"]),
            answers=answers,
        ))
    return records
