"""Feature ingestion, synthetic datasets, vocabulary, and checkpoints.

Binary tensor file ("blob"): magic SINT, version byte 1, dtype byte
(0 = f32, 1 = f64), rank byte, dims as little-endian u32, then the payload
row-major little-endian. Round trips are bit-exact.

Manifest: UTF-8 lines, four tab-separated fields per line:
    video_id <TAB> frame-blob path <TAB> object-blob directory <TAB> label-or-caption
The object directory holds one blob per frame, frame0000.blob upward, each
[N_t, m] (zero rows mark an empty frame). A field that parses as a bare
integer is a class label; anything else is a caption, lowercased and split
on whitespace. Paths resolve relative to the manifest's directory.

Checkpoint directory: params/<name>.blob (parameters and running statistics),
optim/<name>.blob (optimizer moments), config.txt (key=value lines).
"""

from __future__ import annotations

import os
import struct
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import (
    CheckpointError,
    ConfigError,
    FormatError,
    IoError,
    VocabError,
)

MAGIC = b"SINT"
BLOB_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


# ---------------------------------------------------------------------------
# binary tensor files

def write_blob(path, value):
    data = value.data if isinstance(value, T.Tensor) else np.asarray(value)
    code = _DTYPE_CODES.get(np.dtype(data.dtype))
    if code is None:
        raise FormatError(f"blob stores f32/f64 only, got {data.dtype}")
    if data.ndim > 255:
        raise FormatError(f"rank {data.ndim} exceeds the format limit")
    header = struct.pack("<4sBBB", MAGIC, BLOB_VERSION, code, data.ndim)
    dims = np.asarray(data.shape, dtype="<u4").tobytes()
    payload = np.ascontiguousarray(data).astype(_CODE_DTYPES[code], copy=False).tobytes()
    with open(path, "wb") as fh:
        fh.write(header + dims + payload)


def read_blob(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read blob {path}: {exc}") from exc
    if len(raw) < 7:
        raise FormatError(f"{path}: truncated header")
    magic, version, code, rank = struct.unpack("<4sBBB", raw[:7])
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != BLOB_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if code not in _CODE_DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    dim_end = 7 + 4 * rank
    if len(raw) < dim_end:
        raise FormatError(f"{path}: truncated dimension list")
    dims = np.frombuffer(raw[7:dim_end], dtype="<u4").astype(np.int64)
    dtype = _CODE_DTYPES[code]
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - dim_end != expected:
        raise FormatError(
            f"{path}: payload is {len(raw) - dim_end} bytes, expected {expected}")
    flat = np.frombuffer(raw[dim_end:], dtype=dtype)
    arr = flat.reshape(tuple(dims)).astype(dtype.newbyteorder("="), copy=True)
    return T.Tensor(arr)


# ---------------------------------------------------------------------------
# samples and manifests

@dataclass
class VideoSample:
    id: str
    frame_features: np.ndarray          # [T, m]
    object_sets: list                   # per frame: (features [N_t, m], mask or None)
    label: int | None = None
    caption: list | None = None         # word tokens, reserved ids excluded


class ManifestDataset:
    """Validated manifest whose blob contents load on access."""

    def __init__(self, entries, base_dir):
        self._entries = entries
        self._base = base_dir

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i):
        vid, frame_path, obj_dir, label, caption = self._entries[i]
        frames = read_blob(frame_path).data
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise FormatError(f"{vid}: frame features must be [T, m], got {frames.shape}")
        sets = []
        for t in range(frames.shape[0]):
            blob = os.path.join(obj_dir, f"frame{t:04d}.blob")
            if not os.path.exists(blob):
                raise IoError(f"{vid}: missing object blob {blob}")
            objs = read_blob(blob).data
            if objs.ndim != 2 or objs.shape[1] != frames.shape[1]:
                raise FormatError(
                    f"{vid}: object blob {blob} is {objs.shape}, want [N, {frames.shape[1]}]")
            sets.append((objs, None))
        return VideoSample(id=vid, frame_features=frames, object_sets=sets,
                           label=label, caption=caption)


def load_manifest(path):
    base = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise IoError(f"cannot read manifest {path}: {exc}") from exc
    entries, seen = [], set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise FormatError(f"{path}:{lineno}: expected 4 fields, got {len(fields)}")
        vid, frame_rel, obj_rel, tail = fields
        if vid in seen:
            raise FormatError(f"{path}:{lineno}: duplicate video id {vid!r}")
        seen.add(vid)
        frame_path = os.path.join(base, frame_rel)
        obj_dir = os.path.join(base, obj_rel)
        if not os.path.exists(frame_path):
            raise IoError(f"{path}:{lineno}: missing frame blob {frame_rel}")
        if not os.path.isdir(obj_dir):
            raise IoError(f"{path}:{lineno}: missing object directory {obj_rel}")
        try:
            label, caption = int(tail), None
        except ValueError:
            label, caption = None, tail.lower().split()
        entries.append((vid, frame_path, obj_dir, label, caption))
    return ManifestDataset(entries, base)


def save_dataset(samples, out_dir, manifest_name="manifest.tsv"):
    """Write samples as blobs plus a manifest; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for sample in samples:
        frame_rel = f"{sample.id}.frames.blob"
        obj_rel = f"{sample.id}.objects"
        write_blob(os.path.join(out_dir, frame_rel), sample.frame_features)
        os.makedirs(os.path.join(out_dir, obj_rel), exist_ok=True)
        for t, (objs, _mask) in enumerate(sample.object_sets):
            write_blob(os.path.join(out_dir, obj_rel, f"frame{t:04d}.blob"), objs)
        if sample.label is not None:
            tail = str(int(sample.label))
        else:
            tail = " ".join(sample.caption)
        lines.append("\t".join([sample.id, frame_rel, obj_rel, tail]))
    manifest = os.path.join(out_dir, manifest_name)
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# vocabulary

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")


class Vocabulary:
    """Token table with four reserved ids and deterministic ordering."""

    def __init__(self, words):
        self.id_to_token = list(RESERVED) + list(words)
        if len(set(self.id_to_token)) != len(self.id_to_token):
            raise VocabError("duplicate tokens in vocabulary")
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}

    @classmethod
    def build(cls, token_lists):
        counts = Counter()
        for tokens in token_lists:
            counts.update(tokens)
        for reserved in RESERVED:
            counts.pop(reserved, None)
        ordered = sorted(counts, key=lambda tok: (-counts[tok], tok))
        return cls(ordered)

    def __len__(self):
        return len(self.id_to_token)

    def id_of(self, token):
        return self.token_to_id.get(token, UNK_ID)

    def token_of(self, idx):
        if idx < 0 or idx >= len(self.id_to_token):
            raise VocabError(f"id {idx} outside vocabulary of {len(self)}")
        return self.id_to_token[idx]

    def encode(self, tokens, add_specials=True):
        ids = [self.id_of(tok) for tok in tokens]
        if add_specials:
            return [BOS_ID] + ids + [EOS_ID]
        return ids

    def decode(self, ids, strip_reserved=True):
        tokens = [self.token_of(int(i)) for i in ids]
        if strip_reserved:
            tokens = [t for t in tokens if t not in RESERVED]
        return tokens

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.id_to_token[len(RESERVED):]:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                words = [line.strip() for line in fh if line.strip()]
        except OSError as exc:
            raise IoError(f"cannot read vocabulary {path}: {exc}") from exc
        return cls(words)


# ---------------------------------------------------------------------------
# synthetic datasets

@dataclass
class TriadDataset:
    samples: list
    prototypes: np.ndarray      # [D, m] unit rows
    class_triples: np.ndarray   # [C, 3] prototype ids
    n_classes: int
    sigma: float


def _unit_prototypes(rng, count, m):
    protos = rng.standard_normal((count, m))
    return protos / np.linalg.norm(protos, axis=1, keepdims=True)


# Prototypes come in sign pairs straddling a shared base direction. The gap
# between the two members of a pair, before renormalizing:
PAIR_GAP = 0.5

# Sign patterns assigned to the classes sharing one base group. All three
# have the same sign sum, so the planted triple's vector sum is identical
# for every class in the group: frame-level averages cannot separate them,
# only per-object reading of which sign rides on which base can.
GROUP_PATTERNS = ((1, 1, -1), (1, -1, 1), (-1, 1, 1))


def _triad_prototypes(rng, n_classes, n_prototypes, m):
    """Signed prototype table plus the class triples over it.

    Classes come in groups of three; each group owns three base directions
    and one shared fine direction. Prototype 2b is base b with the fine
    direction added, prototype 2b+1 has it subtracted. Spare prototypes used
    as clutter get private base and fine directions.
    """
    groups = (n_classes + 2) // 3
    nb_cls = 3 * groups
    nb_spare = (n_prototypes - 2 * nb_cls + 1) // 2
    u = rng.standard_normal((nb_cls + nb_spare, m))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v = rng.standard_normal((groups + nb_spare, m))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    protos = []
    for b in range(nb_cls + nb_spare):
        fine = v[b // 3] if b < nb_cls else v[groups + (b - nb_cls)]
        for s in (1.0, -1.0):
            p = u[b] + s * PAIR_GAP * fine
            protos.append(p / np.linalg.norm(p))
    protos = np.asarray(protos)[:n_prototypes]
    triples = np.asarray(
        [[2 * (3 * (c // 3) + j) + (0 if GROUP_PATTERNS[c % 3][j] > 0 else 1)
          for j in range(3)] for c in range(n_classes)])
    return protos, triples


def _capped_draw(rng, present, candidates, membership, count, exact=True):
    """Draw `count` distinct ids, keeping every class triple at most
    two-thirds present (counting ids already in the frame), so no frame can
    contain a competing complete triple. Retries a few shuffles to escape
    unlucky pick orders; with exact=False returns the best attempt instead
    of raising."""
    if count <= 0:
        return []
    best = []
    for _ in range(16):
        counts = Counter()
        for p in present:
            for ti in membership.get(p, ()):
                counts[ti] += 1
        picked = []
        for idx in rng.permutation(len(candidates)):
            p = candidates[idx]
            tris = membership.get(p, ())
            if any(counts[ti] >= 2 for ti in tris):
                continue
            for ti in tris:
                counts[ti] += 1
            picked.append(p)
            if len(picked) == count:
                return picked
        if len(picked) > len(best):
            best = picked
    if exact:
        raise ConfigError(f"cannot draw {count} distractors under the triple cap")
    return best


def synth_triad(seed, n_classes=8, n_prototypes=None, sigma=0.3, T=8, N=8,
                m=16, per_class=10, distractors=None):
    """Classification set where each class is a specific triple of prototypes.

    Prototypes come in sign pairs around shared base directions, and the
    classes within a base group use equal-sum sign patterns, so the planted
    triple's sum is the same for every class in the group. Half the frames
    (rounded up) plant the full triple plus distractors; the rest carry only
    distractors. Two distractor slots per planted frame are filled from other
    classes' prototypes, which puts opposite-sign objects of the same base in
    one frame: averaging over a frame cancels the signs, so pooled object
    statistics are nearly class-blind and the label is recoverable only by
    reading individual objects. The remaining slots come from a diverse spare
    pool. No frame ever contains more than two members of any class triple
    besides the planted one. With zero distractor slots every frame is
    exactly the planted triple.
    """
    if distractors is None:
        distractors = N - 3
    if distractors < 0 or N != 3 + distractors:
        raise ConfigError(f"N = {N} must equal 3 + distractors ({distractors})")
    groups = (n_classes + 2) // 3
    floor = max(3 * n_classes, 6 * groups)
    if n_prototypes is None:
        n_prototypes = 3 * n_classes + 8
    if n_prototypes < floor:
        raise ConfigError(
            f"{n_prototypes} prototypes cannot seat {n_classes} triples "
            f"(need {floor})")

    protos, triples = _triad_prototypes(
        np.random.default_rng((seed, 0)), n_classes, n_prototypes, m)
    membership = {}
    for ti, tri in enumerate(triples):
        for p in tri:
            membership.setdefault(int(p), []).append(ti)
    n_cls_protos = 6 * groups
    foreign_quota = min(2, distractors)
    context_quota = min(2 * foreign_quota, N)
    samples = []
    for c in range(n_classes):
        own = [int(p) for p in triples[c]]
        foreign = [p for p in range(min(n_cls_protos, n_prototypes))
                   if p not in own]
        spare = list(range(n_cls_protos, n_prototypes))
        for i in range(per_class):
            rng = np.random.default_rng((seed, 1, c, i))
            n_planted = T if distractors == 0 else (T + 1) // 2
            planted = np.zeros(T, bool)
            planted[rng.permutation(T)[:n_planted]] = True
            frames, sets = [], []
            for t in range(T):
                if planted[t]:
                    ids = list(own)
                    ids += _capped_draw(rng, ids, foreign, membership,
                                        foreign_quota, exact=False)
                else:
                    ids = _capped_draw(rng, [], foreign, membership,
                                       context_quota, exact=False)
                rest = spare if len(spare) >= N - len(ids) else \
                    spare + [p for p in foreign if p not in ids]
                ids += _capped_draw(rng, ids, rest, membership, N - len(ids))
                order = rng.permutation(len(ids))
                feats = protos[np.asarray(ids)[order]] + sigma * rng.standard_normal((len(ids), m))
                sets.append((feats.astype(np.float64), None))
                frames.append(feats.mean(axis=0))
            samples.append(VideoSample(
                id=f"triad-{c}-{i}", frame_features=np.asarray(frames),
                object_sets=sets, label=c))
    return TriadDataset(samples=samples, prototypes=protos, class_triples=triples,
                        n_classes=n_classes, sigma=sigma)


@dataclass
class CaptionDataset:
    samples: list
    vocab: Vocabulary
    prototypes: np.ndarray
    nouns: list
    verbs: list
    pairs: list                 # (subject idx, object idx) per sample
    role: np.ndarray            # unit direction; +ROLE_GAP marks the subject


# Offset along the role direction: subject +, object -. The two cancel in
# the frame mean, so only per-object readers can tell who acts on whom.
ROLE_GAP = 1.0


def synth_caption(seed, n_nouns=6, n_verbs=5, sigma=0.1, T=4, N=4, m=16,
                  per_pair=2, pool=4):
    """Caption set: each video plants one (subject, object) noun pair.

    Caption template is "a <subj> <verb> a <obj>"; the verb index is
    (subject + object) mod n_verbs, so naming the verb requires the pair,
    not either noun alone. The subject carries +ROLE_GAP and the object
    -ROLE_GAP along a fixed role direction, and objects are shuffled within
    each frame, so word order is recoverable from the features themselves,
    never from slot order. Distractor objects come from a spare pool only,
    keeping the planted pair unambiguous.
    """
    if n_nouns < 2:
        raise ConfigError(f"need at least 2 nouns, got {n_nouns}")
    if N < 2:
        raise ConfigError(f"need at least 2 object slots, got {N}")
    if N - 2 > pool:
        raise ConfigError(f"{N - 2} distractor slots exceed the pool of {pool}")
    nouns = [f"noun{j}" for j in range(n_nouns)]
    verbs = [f"verb{j}" for j in range(n_verbs)]
    if 1 + n_nouns + n_verbs + len(RESERVED) > 40:
        raise ConfigError("vocabulary budget of 40 tokens exceeded")
    rng0 = np.random.default_rng((seed, 0))
    protos = _unit_prototypes(rng0, n_nouns + pool, m)
    role = _unit_prototypes(rng0, 1, m)[0]
    samples, pairs = [], []
    for s in range(n_nouns):
        for o in range(n_nouns):
            if s == o:
                continue
            for i in range(per_pair):
                rng = np.random.default_rng((seed, 1, s, o, i))
                frames, sets = [], []
                for _t in range(T):
                    extra = list(n_nouns + rng.permutation(pool)[:N - 2])
                    base = protos[np.asarray([s, o] + extra)].copy()
                    base[0] += ROLE_GAP * role
                    base[1] -= ROLE_GAP * role
                    order = rng.permutation(N)
                    feats = base[order] + sigma * rng.standard_normal((N, m))
                    sets.append((feats.astype(np.float64), None))
                    frames.append(feats.mean(axis=0))
                caption = ["a", nouns[s], verbs[(s + o) % n_verbs], "a", nouns[o]]
                samples.append(VideoSample(
                    id=f"cap-{s}-{o}-{i}", frame_features=np.asarray(frames),
                    object_sets=sets, caption=caption))
                pairs.append((s, o))
    vocab = Vocabulary.build([sample.caption for sample in samples])
    return CaptionDataset(samples=samples, vocab=vocab, prototypes=protos,
                          nouns=nouns, verbs=verbs, pairs=pairs, role=role)


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    params: dict = field(default_factory=dict)   # name -> ndarray (params + stats)
    optim: dict = field(default_factory=dict)    # name -> ndarray
    config: dict = field(default_factory=dict)   # str -> str


def checkpoint_save(path, params, stats=None, optim=None, config=None):
    """Serialize named arrays under params/ and optim/ plus config.txt."""
    os.makedirs(os.path.join(path, "params"), exist_ok=True)
    os.makedirs(os.path.join(path, "optim"), exist_ok=True)
    merged = dict(params)
    for name, arr in (stats or {}).items():
        if name in merged:
            raise CheckpointError(f"stat name collides with a parameter: {name}")
        merged[name] = arr
    for name, value in merged.items():
        write_blob(os.path.join(path, "params", name + ".blob"), value)
    for name, value in (optim or {}).items():
        write_blob(os.path.join(path, "optim", name + ".blob"), value)
    lines = [f"{k}={v}" for k, v in sorted((config or {}).items())]
    with open(os.path.join(path, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def _read_blob_dir(dirpath):
    out = {}
    if not os.path.isdir(dirpath):
        return out
    for fname in sorted(os.listdir(dirpath)):
        if fname.endswith(".blob"):
            out[fname[:-5]] = read_blob(os.path.join(dirpath, fname)).data
    return out


def checkpoint_load(path):
    if not os.path.isdir(path):
        raise CheckpointError(f"no checkpoint directory at {path}")
    config = {}
    cfg_path = os.path.join(path, "config.txt")
    if os.path.exists(cfg_path):
        with open(cfg_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    key, _, value = line.partition("=")
                    config[key] = value
    return Checkpoint(params=_read_blob_dir(os.path.join(path, "params")),
                      optim=_read_blob_dir(os.path.join(path, "optim")),
                      config=config)


def restore_model(model, checkpoint):
    """Assign saved arrays into a constructed model; strict name and shape match."""
    tensors = model.named_parameters()
    stats = model.named_stats()
    expected = set(tensors) | set(stats)
    saved = set(checkpoint.params)
    if expected != saved:
        missing = sorted(expected - saved)[:3]
        extra = sorted(saved - expected)[:3]
        raise CheckpointError(
            f"checkpoint does not match the model (missing {missing}, extra {extra})")
    for name, tensor in tensors.items():
        arr = checkpoint.params[name]
        if arr.shape != tensor.data.shape:
            raise CheckpointError(
                f"{name}: saved shape {arr.shape} vs model {tensor.data.shape}")
        tensor.data = arr.astype(tensor.data.dtype, copy=True)
    new_stats = {}
    for name, current in stats.items():
        arr = checkpoint.params[name]
        if arr.shape != current.shape:
            raise CheckpointError(
                f"{name}: saved shape {arr.shape} vs model {current.shape}")
        new_stats[name] = arr.astype(current.dtype, copy=True)
    model.set_stats(new_stats)
    return model
