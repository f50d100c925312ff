"""Named, stateless random sub-streams derived from a single integer seed."""

import zlib

import numpy as np

_TAGS = {}


def _key(part):
    if isinstance(part, (int, np.integer)):
        return int(part)
    if part not in _TAGS:
        _TAGS[part] = zlib.crc32(str(part).encode("utf-8"))
    return _TAGS[part]


def seed_sequence(seed, *keys):
    """SeedSequence for the stream ``seed/keys[0]/keys[1]/...``.

    Streams are addressed by path, not by spawn order, so the same path
    always yields the same numbers regardless of what else was drawn.
    """
    return np.random.SeedSequence(int(seed), spawn_key=tuple(_key(k) for k in keys))


def child(ss, *keys):
    return np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + tuple(_key(k) for k in keys))


def rng(seed, *keys):
    return np.random.default_rng(seed_sequence(seed, *keys))
