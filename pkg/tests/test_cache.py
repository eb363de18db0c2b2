import numpy as np
import pytest

from cachetrack import Aggregator, AggregatorConfig, OpCounter
from cachetrack.aggregator import KeyframeBlocked, layer_norm_rows
from cachetrack.attention import project_qkv
from cachetrack.cache import (
    CachePublisher,
    attend_with_cache,
    build_cache,
    load_cache,
    save_cache,
)

from conftest import random_tokens


@pytest.fixture
def agg():
    return Aggregator(AggregatorConfig(num_layers=4, d_k=16, num_register_tokens=2, seed=21))


def make_keyframes(rng, n, num_patch=6, num_register=2, d_k=16):
    return [random_tokens(rng, i, num_patch, num_register, d_k) for i in range(n)]


# ---- build ------------------------------------------------------------------


def test_build_requires_keyframes(agg):
    with pytest.raises(ValueError, match="at least one keyframe"):
        build_cache([], agg)


def test_single_keyframe_cache_is_projection_of_framewise_output(agg, rng):
    kf = make_keyframes(rng, 1)[0]
    cache, _ = build_cache([kf], agg)
    after_fw = agg.framewise_layer(kf, 0)
    _, k, v = project_qkv(layer_norm_rows(after_fw.tokens), agg.layers[1])
    assert np.array_equal(cache.keys[0], k)
    assert np.array_equal(cache.values[0], v)


def test_rebuild_is_bit_identical(agg, rng):
    kfs = make_keyframes(rng, 3)
    c1, _ = build_cache(kfs, agg)
    c2, _ = build_cache(kfs, agg)
    assert c1.content_hash() == c2.content_hash()
    for a, b in zip(c1.keys + c1.values, c2.keys + c2.values):
        assert np.array_equal(a, b)


def test_permuted_keyframes_give_block_permuted_cache(agg, rng):
    kfs = make_keyframes(rng, 3)
    perm = [2, 0, 1]
    c1, _ = build_cache(kfs, agg)
    c2, _ = build_cache([kfs[i] for i in perm], agg)
    t = kfs[0].total
    for layer in range(len(c1.keys)):
        for j, src in enumerate(perm):
            a = c1.keys[layer][src * t : (src + 1) * t]
            b = c2.keys[layer][j * t : (j + 1) * t]
            assert np.max(np.abs(a - b)) <= 1e-6


def test_cache_row_ordering_and_shapes(agg, rng):
    kfs = make_keyframes(rng, 4)
    cache, finals = build_cache(kfs, agg)
    assert cache.keyframe_ids == (0, 1, 2, 3)
    assert len(cache.keys) == agg.num_global_layers
    rows = 4 * kfs[0].total
    for block in cache.keys + cache.values:
        assert block.shape == (rows, 16)
    assert len(finals) == 4


# ---- attend -------------------------------------------------------------------


@pytest.mark.parametrize("b", [1, 2, 4])
def test_attend_matches_blocked_joint_oracle(agg, b):
    # the module's central correctness check: tracking against the cache is
    # the keyframe-blocked joint forward, restricted to the query frame
    rng = np.random.default_rng(100 + b)
    kfs = make_keyframes(rng, b)
    query = random_tokens(rng, b, 6, 2, 16)
    cache, _ = build_cache(kfs, agg)
    cached = attend_with_cache(query, cache, agg)
    joint, _ = agg.aggregate_forward(kfs + [query], KeyframeBlocked(b))
    assert np.max(np.abs(cached.tokens - joint[-1].tokens)) < 1e-5


def test_attend_with_query_equal_to_lone_keyframe(agg, rng):
    kf = make_keyframes(rng, 1)[0]
    cache, _ = build_cache([kf], agg)
    out = attend_with_cache(kf, cache, agg)
    assert np.all(np.isfinite(out.tokens))


def test_attend_score_matrix_columns(rng):
    # M+R=20, B=4 -> the query's score matrix has (B+1)(M+R) = 100 columns
    agg = Aggregator(AggregatorConfig(num_layers=2, d_k=16, num_register_tokens=4, seed=0))
    kfs = [random_tokens(rng, i, 16, 4, 16) for i in range(4)]
    query = random_tokens(rng, 4, 16, 4, 16)
    cache, _ = build_cache(kfs, agg)
    counter = OpCounter()
    agg.op_counter = counter
    attend_with_cache(query, cache, agg)
    agg.op_counter = None
    elements = counter.per_layer_elements[1]
    assert elements // 20 == 100


def test_attend_dimension_and_cache_errors(agg, rng):
    kfs = make_keyframes(rng, 2)
    cache, _ = build_cache(kfs, agg)
    with pytest.raises(ValueError, match="no published cache"):
        attend_with_cache(kfs[0], None, agg)
    bad_query = random_tokens(rng, 9, 6, 2, 8)
    with pytest.raises(ValueError, match="width"):
        attend_with_cache(bad_query, cache, agg)
    other = Aggregator(AggregatorConfig(num_layers=2, d_k=16, num_register_tokens=2))
    with pytest.raises(ValueError, match="layers"):
        attend_with_cache(kfs[0], cache, other)


def test_attend_never_mutates_cache(agg, rng):
    kfs = make_keyframes(rng, 3)
    cache, _ = build_cache(kfs, agg)
    before = cache.content_hash()
    for i in range(10):
        attend_with_cache(random_tokens(rng, 50 + i, 6, 2, 16), cache, agg)
    assert cache.content_hash() == before


# ---- publication / rollback ------------------------------------------------------


def test_publisher_generations_and_rollback(agg, rng):
    pub = CachePublisher()
    kfs = make_keyframes(rng, 2)
    c1, _ = build_cache(kfs[:1], agg, pub)
    assert c1.generation == 1
    snapshot = pub.snapshot()
    c2, _ = build_cache(kfs, agg, pub)
    assert c2.generation == 2
    restored = pub.rollback()
    assert restored.generation == 3
    assert restored.content_hash() == snapshot.content_hash()
    assert np.array_equal(restored.keys[0], snapshot.keys[0])


def test_rollback_without_snapshot_errors(agg, rng):
    pub = CachePublisher()
    with pytest.raises(ValueError, match="roll back"):
        pub.rollback()
    build_cache(make_keyframes(rng, 1), agg, pub)
    with pytest.raises(ValueError, match="roll back"):
        pub.rollback()  # only one publish: nothing to revert to


def test_double_rollback_errors(agg, rng):
    pub = CachePublisher()
    kfs = make_keyframes(rng, 2)
    build_cache(kfs[:1], agg, pub)
    build_cache(kfs, agg, pub)
    pub.rollback()
    with pytest.raises(ValueError, match="roll back"):
        pub.rollback()


def test_generation_strictly_increases(agg, rng):
    pub = CachePublisher()
    kfs = make_keyframes(rng, 3)
    gens = []
    gens.append(build_cache(kfs[:1], agg, pub)[0].generation)
    gens.append(build_cache(kfs[:2], agg, pub)[0].generation)
    gens.append(pub.rollback().generation)
    gens.append(build_cache(kfs, agg, pub)[0].generation)
    assert gens == sorted(gens) and len(set(gens)) == len(gens)


# ---- footprint ---------------------------------------------------------------------


def test_footprint_formula(rng):
    # 2 blocks (K and V) * 2 global layers * B*(M+R) rows * d_k * 4 bytes
    agg = Aggregator(AggregatorConfig(num_layers=4, d_k=16, num_register_tokens=4, seed=1))
    kfs = [random_tokens(rng, i, 4, 4, 16) for i in range(2)]
    cache, _ = build_cache(kfs, agg)
    assert cache.memory_footprint() == 2 * 2 * (2 * 8) * 16 * 4 == 4096


def test_footprint_linear_in_keyframes(agg, rng):
    kfs = make_keyframes(rng, 4)
    half, _ = build_cache(kfs[:2], agg)
    full, _ = build_cache(kfs, agg)
    assert full.memory_footprint() == 2 * half.memory_footprint()


# ---- serialization --------------------------------------------------------------------


def test_cache_round_trip(tmp_path, agg, rng):
    kfs = make_keyframes(rng, 3)
    cache, _ = build_cache(kfs, agg)
    path = tmp_path / "scene.kvc"
    save_cache(cache, path)
    loaded = load_cache(path)
    assert loaded.generation == cache.generation
    assert loaded.num_patch == cache.num_patch
    assert loaded.num_register == cache.num_register
    assert loaded.d_k == cache.d_k
    assert loaded.num_layers == cache.num_layers
    for a, b in zip(cache.keys + cache.values, loaded.keys + loaded.values):
        assert np.array_equal(a, b)


def test_cache_file_round_trip_bit_exact(tmp_path, agg, rng):
    cache, _ = build_cache(make_keyframes(rng, 2), agg)
    p1, p2 = tmp_path / "a.kvc", tmp_path / "b.kvc"
    save_cache(cache, p1)
    save_cache(load_cache(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_cache_load_errors(tmp_path, agg, rng):
    cache, _ = build_cache(make_keyframes(rng, 1), agg)
    path = tmp_path / "scene.kvc"
    save_cache(cache, path)
    truncated = tmp_path / "short.kvc"
    truncated.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError, match="bytes"):
        load_cache(truncated)
    bad = tmp_path / "bad.kvc"
    bad.write_bytes(b"NOPE" + path.read_bytes()[4:])
    with pytest.raises(ValueError, match="magic"):
        load_cache(bad)
    stub = tmp_path / "stub.kvc"
    stub.write_bytes(b"KV")
    with pytest.raises(ValueError, match="truncated"):
        load_cache(stub)
