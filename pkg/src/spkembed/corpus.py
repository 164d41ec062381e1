"""Feature-file I/O, manifests, trial lists, and the synthetic corpus.

Feature file layout (little-endian):

    magic   b"ASPF"
    version u32 (currently 1)
    frames  u32
    dim     u32
    data    frames * dim float32, row-major

Manifests are text files with one "<utt-id> <speaker-id> <path>" line per
utterance; relative paths resolve against the manifest's directory.  Trial
lists are "<enroll-id> <test-id> target|nontarget" lines, where the enroll
field may hold several comma-separated utterance ids for multi-session
enrollment.

The synthetic generator plants speaker identity in both the frame means and
the frame variances, and mixes in speaker-independent filler frames so that
attention has a frame-selection signal to learn.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ParseError

FEATURE_MAGIC = b"ASPF"
FEATURE_VERSION = 1

_HEADER = struct.Struct("<4sIII")


def ensure_dir(path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_features(path, frames):
    """Write a float32 feature file; the payload round-trips bit-exactly."""
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
        raise ValueError(f"features must be a non-empty 2-d array, got {frames.shape}")
    payload = np.ascontiguousarray(frames, dtype="<f4")
    if not np.all(np.isfinite(payload)):
        raise ValueError("features must be finite")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, frames.shape[0], frames.shape[1]))
        fh.write(payload.tobytes())


def read_features(path, dtype=np.float64):
    """Read a feature file back as a (frames, dim) array (float64 by default)."""
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise FormatError(f"{path}: file shorter than feature header")
        magic, version, frames, dim = _HEADER.unpack(header)
        if magic != FEATURE_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != FEATURE_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        data = fh.read(4 * frames * dim)
        if len(data) != 4 * frames * dim:
            raise FormatError(f"{path}: truncated payload")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    return np.frombuffer(data, dtype="<f4").reshape(frames, dim).astype(dtype)


@dataclass
class ManifestEntry:
    utt_id: str
    speaker_id: str
    path: Path


def write_manifest(path, entries):
    lines = [f"{e.utt_id} {e.speaker_id} {e.path}\n" for e in entries]
    Path(path).write_text("".join(lines))


def load_manifest(path):
    """Parse a manifest; utterance ids must be unique and paths must exist."""
    path = Path(path)
    entries = []
    seen = set()
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ParseError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}", lineno)
        utt_id, speaker_id, feat_path = parts
        if utt_id in seen:
            raise ParseError(f"{path}:{lineno}: duplicate utterance id {utt_id!r}", lineno)
        seen.add(utt_id)
        feat_path = Path(feat_path)
        if not feat_path.is_absolute():
            feat_path = path.parent / feat_path
        if not feat_path.exists():
            raise ParseError(f"{path}:{lineno}: missing feature file {feat_path}", lineno)
        entries.append(ManifestEntry(utt_id, speaker_id, feat_path))
    return entries


@dataclass
class TrialRecord:
    enroll_ids: tuple
    test_id: str
    label: str  # "target" or "nontarget"

    @property
    def is_target(self):
        return self.label == "target"


def parse_trials(path):
    """Parse a trial list; blank lines are skipped, bad labels are fatal."""
    path = Path(path)
    records = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ParseError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}", lineno)
        enroll, test, label = parts
        if label not in ("target", "nontarget"):
            raise ParseError(f"{path}:{lineno}: bad label {label!r}", lineno)
        records.append(TrialRecord(tuple(enroll.split(",")), test, label))
    return records


def write_trials(path, records):
    lines = [f"{','.join(r.enroll_ids)} {r.test_id} {r.label}\n" for r in records]
    Path(path).write_text("".join(lines))


@dataclass
class SynthConfig:
    num_speakers: int = 50
    utts_per_speaker: int = 30
    frames_range: tuple = (150, 250)
    dim: int = 20
    speaker_mean_scale: float = 0.3
    speaker_logstd_scale: float = 0.4
    filler_prob: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.num_speakers < 1 or self.utts_per_speaker < 1:
            raise ConfigError("need at least one speaker and one utterance each")
        lo, hi = self.frames_range
        if lo <= 14:
            raise ConfigError("frames_range minimum must exceed the 15-frame receptive field")
        if hi < lo:
            raise ConfigError("frames_range maximum must be >= minimum")
        if self.dim < 1:
            raise ConfigError("dim must be >= 1")
        if not 0 <= self.filler_prob < 1:
            raise ConfigError("filler_prob must lie in [0, 1)")
        if self.speaker_mean_scale < 0 or self.speaker_logstd_scale < 0:
            raise ConfigError("scales must be non-negative")


def synth_generate(cfg, out_dir):
    """Write a synthetic corpus under ``out_dir``; returns the manifest entries.

    Speaker s draws a mean vector from N(0, tau^2 I) and a log-std vector
    from N(0, rho^2 I).  Each frame is, with probability 1 - filler_prob, a
    draw from N(mean_s, diag(exp(2 logstd_s))); otherwise a filler frame from
    N(0, I) carrying no speaker information.  Fully determined by the seed.
    """
    out_dir = ensure_dir(out_dir)
    feat_dir = ensure_dir(out_dir / "feats")
    rng = np.random.default_rng(cfg.seed)
    entries = []
    spk_width = len(str(cfg.num_speakers - 1))
    utt_width = len(str(cfg.utts_per_speaker - 1))
    for s in range(cfg.num_speakers):
        speaker_id = f"spk{s:0{spk_width}d}"
        mean = rng.normal(0.0, cfg.speaker_mean_scale, cfg.dim)
        std = np.exp(rng.normal(0.0, cfg.speaker_logstd_scale, cfg.dim))
        for u in range(cfg.utts_per_speaker):
            utt_id = f"{speaker_id}_u{u:0{utt_width}d}"
            frames = int(rng.integers(cfg.frames_range[0], cfg.frames_range[1] + 1))
            speech = mean + std * rng.standard_normal((frames, cfg.dim))
            if cfg.filler_prob > 0:
                filler_mask = rng.random(frames) < cfg.filler_prob
                filler = rng.standard_normal((frames, cfg.dim))
                speech = np.where(filler_mask[:, None], filler, speech)
            rel_path = Path("feats") / f"{utt_id}.aspf"
            write_features(out_dir / rel_path, speech)
            entries.append(ManifestEntry(utt_id, speaker_id, rel_path))
    write_manifest(out_dir / "manifest.txt", entries)
    return load_manifest(out_dir / "manifest.txt")


def make_trials(entries, num_nontargets, seed=0):
    """Build a labeled trial list over single-utterance enrollments.

    Targets are all within-speaker utterance pairs; nontargets are a random
    deterministic sample of cross-speaker pairs.
    """
    by_speaker = {}
    for e in entries:
        by_speaker.setdefault(e.speaker_id, []).append(e.utt_id)
    records = []
    for speaker in sorted(by_speaker):
        utts = by_speaker[speaker]
        for i in range(len(utts)):
            for j in range(i + 1, len(utts)):
                records.append(TrialRecord((utts[i],), utts[j], "target"))
    rng = np.random.default_rng(seed)
    all_utts = [(e.utt_id, e.speaker_id) for e in entries]
    seen = set()
    guard = 0
    while len(seen) < num_nontargets and guard < 100 * num_nontargets:
        guard += 1
        a, b = rng.integers(0, len(all_utts), 2)
        if a == b or all_utts[a][1] == all_utts[b][1]:
            continue
        pair = (all_utts[a][0], all_utts[b][0])
        if pair in seen:
            continue
        seen.add(pair)
    records.extend(TrialRecord((a,), b, "nontarget") for a, b in sorted(seen))
    return records
