"""Video dataset manifests, leave-one-subject-out splits and manifest merging.

A manifest is a JSON-lines file.  The first line is a header::

    {"label_names": ["open", "close", ...], "name": "gtea"}

and every following line describes one video::

    {"video_id": "S1_v0", "subject": "S1", "frames": ["..."], "labels": [0, 0, 1]}

Frame paths are stored as written and resolved relative to the manifest's
directory when read.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path


class ManifestError(ValueError):
    """Raised for unparseable or invalid manifests."""


@dataclass(frozen=True)
class LabelMap:
    names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.names) < 2:
            raise ManifestError(f"need at least 2 classes, got {len(self.names)}")
        if len(set(self.names)) != len(self.names):
            raise ManifestError(f"duplicate class names in {list(self.names)}")

    @property
    def L(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True)
class VideoRecord:
    video_id: str
    subject: str
    frame_paths: tuple[str, ...]
    frame_labels: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "frame_paths", tuple(self.frame_paths))
        object.__setattr__(self, "frame_labels", tuple(int(x) for x in self.frame_labels))

    def __len__(self):
        return len(self.frame_paths)


@dataclass
class DatasetManifest:
    videos: list[VideoRecord]
    label_map: LabelMap
    name: str
    # directory frame paths are relative to; not part of the identity
    root: Path | None = field(default=None, compare=False)
    warnings: list[str] = field(default_factory=list, compare=False)
    # optional per-class category tags, e.g. "hand-object" / "no-interaction"
    categories: tuple[str, ...] | None = None

    def __post_init__(self):
        validate_manifest(self)

    @property
    def subjects(self) -> list[str]:
        return sorted({v.subject for v in self.videos})

    def video(self, video_id: str) -> VideoRecord:
        for v in self.videos:
            if v.video_id == video_id:
                return v
        raise KeyError(video_id)

    def frame_path(self, rel: str) -> Path:
        p = Path(rel)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    def subset(self, video_ids) -> "DatasetManifest":
        keep = set(video_ids)
        return DatasetManifest(
            [v for v in self.videos if v.video_id in keep],
            self.label_map, self.name, root=self.root, categories=self.categories,
        )


@dataclass(frozen=True)
class LosoSplit:
    held_out_subject: str
    train_videos: tuple[str, ...]
    test_videos: tuple[str, ...]


def validate_manifest(m: DatasetManifest) -> None:
    L = m.label_map.L
    if m.categories is not None and len(m.categories) != L:
        raise ManifestError(f"{len(m.categories)} categories for {L} classes")
    seen = set()
    for v in m.videos:
        if v.video_id in seen:
            raise ManifestError(f"duplicate video_id {v.video_id!r}")
        seen.add(v.video_id)
        if not v.subject:
            raise ManifestError(f"video {v.video_id!r} has an empty subject")
        if len(v.frame_paths) == 0:
            raise ManifestError(f"video {v.video_id!r} has no frames")
        if len(v.frame_paths) != len(v.frame_labels):
            raise ManifestError(
                f"video {v.video_id!r}: {len(v.frame_paths)} frames but "
                f"{len(v.frame_labels)} labels"
            )
        if len(set(v.frame_paths)) != len(v.frame_paths):
            raise ManifestError(f"video {v.video_id!r} has repeated frame paths")
        bad = [y for y in v.frame_labels if not 0 <= y < L]
        if bad:
            raise ManifestError(
                f"video {v.video_id!r}: label {bad[0]} out of range for {L} classes"
            )


def write_manifest(m: DatasetManifest, path) -> None:
    header = {"label_names": list(m.label_map.names), "name": m.name}
    if m.categories is not None:
        header["label_categories"] = list(m.categories)
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header) + "\n")
        for v in m.videos:
            rec = {
                "video_id": v.video_id,
                "subject": v.subject,
                "frames": list(v.frame_paths),
                "labels": list(v.frame_labels),
            }
            f.write(json.dumps(rec) + "\n")


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Read and validate a JSON-lines manifest.

    Missing frame files are not an error (frames may be produced by a later
    stage); they are collected into ``manifest.warnings``.
    """
    path = Path(path)
    header = None
    videos = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{lineno}: {e.msg}") from e
            if header is None:
                if "label_names" not in rec or "name" not in rec:
                    raise ManifestError(f"{path}:{lineno}: first line must be the header")
                header = rec
                continue
            try:
                videos.append(VideoRecord(
                    video_id=str(rec["video_id"]), subject=str(rec["subject"]),
                    frame_paths=rec["frames"], frame_labels=rec["labels"],
                ))
            except (KeyError, TypeError, ValueError) as e:
                raise ManifestError(f"{path}:{lineno}: malformed video record ({e})") from e
    if header is None:
        raise ManifestError(f"{path}: empty manifest")
    cats = header.get("label_categories")
    m = DatasetManifest(
        videos, LabelMap(header["label_names"]), header["name"], root=path.parent,
        categories=tuple(cats) if cats is not None else None,
    )
    if check_files:
        for v in m.videos:
            missing = [p for p in v.frame_paths if not m.frame_path(p).exists()]
            if missing:
                m.warnings.append(
                    f"video {v.video_id!r}: {len(missing)} missing frame files "
                    f"(first: {missing[0]})"
                )
    return m


def loso_splits(m: DatasetManifest) -> list[LosoSplit]:
    subjects = m.subjects
    if len(subjects) < 2:
        raise ManifestError(f"leave-one-subject-out needs >= 2 subjects, got {len(subjects)}")
    splits = []
    for s in subjects:
        test = tuple(v.video_id for v in m.videos if v.subject == s)
        train = tuple(v.video_id for v in m.videos if v.subject != s)
        splits.append(LosoSplit(s, train, test))
    return splits


def merge_manifests(a: DatasetManifest, b: DatasetManifest) -> DatasetManifest:
    """Combine two datasets into one label space.

    Class names are deduplicated; subjects and video ids are prefixed with
    their source manifest name so no subject can leak across a LOSO split.
    """
    names = list(a.label_map.names)
    for n in b.label_map.names:
        if n not in names:
            names.append(n)
    cats = None
    if a.categories is not None or b.categories is not None:
        by_name = {}
        for m in (b, a):
            if m.categories is not None:
                by_name.update(zip(m.label_map.names, m.categories))
        cats = tuple(by_name.get(n, "") for n in names)

    videos = []
    for m in (a, b):
        remap = [names.index(n) for n in m.label_map.names]
        root = m.root
        for v in m.videos:
            paths = v.frame_paths
            if root is not None:
                paths = tuple(
                    p if os.path.isabs(p) else str(root / p) for p in v.frame_paths
                )
            videos.append(VideoRecord(
                video_id=f"{m.name}/{v.video_id}",
                subject=f"{m.name}/{v.subject}",
                frame_paths=paths,
                frame_labels=tuple(remap[y] for y in v.frame_labels),
            ))
    return DatasetManifest(videos, LabelMap(names), f"{a.name}+{b.name}", categories=cats)


def dataset_summary(m: DatasetManifest) -> dict:
    """Subjects / frames / classes counts in the layout of a dataset-statistics table."""
    return {
        "name": m.name,
        "subjects": len(m.subjects),
        "videos": len(m.videos),
        "frames": sum(len(v) for v in m.videos),
        "classes": m.label_map.L,
    }
