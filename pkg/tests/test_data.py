import hashlib
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from mcpnet import data as dm
from mcpnet.data import Manifest, Record, SynthConfig
from mcpnet.sketchio import LAMP, extract_points, load_sketch, preprocess


def manifest_of(counts, root=Path(".")):
    records = [Record(f"{cat}/{i}.png", cat) for cat, n in counts.items() for i in range(n)]
    specs = {cat: dm.TEMPLATE_SPECS.get(cat, LAMP) for cat in counts}
    return Manifest(records, specs, root)


# splitting

def test_split_per_category_proportions():
    out = dm.split(manifest_of({"lamp": 1000, "chair": 1000}), 0.75, seed=0)
    counts = Counter((r.category, r.split) for r in out.records)
    assert counts == {("lamp", "train"): 750, ("lamp", "test"): 250,
                      ("chair", "train"): 750, ("chair", "test"): 250}


def test_split_two_items_half():
    out = dm.split(manifest_of({"lamp": 2}), 0.5, seed=3)
    assert sorted(r.split for r in out.records) == ["test", "train"]


def test_split_deterministic_and_seed_sensitive():
    m = manifest_of({"lamp": 40, "rifle": 17})
    a, b = dm.split(m, 0.75, 11), dm.split(m, 0.75, 11)
    assert [r.split for r in a.records] == [r.split for r in b.records]
    assert [r.split for r in dm.split(m, 0.75, 12).records] != [r.split for r in a.records]


@pytest.mark.parametrize("fraction", [0.1, 0.33, 0.5, 0.75, 0.9])
def test_split_partition_and_stratification(fraction):
    m = manifest_of({"lamp": 37, "chair": 5, "rifle": 120})
    out = dm.split(m, fraction, 0)
    assert [r.path for r in out.records] == [r.path for r in m.records]
    assert {r.split for r in out.records} <= {"train", "test"}
    for cat in m.categories:
        recs = [r for r in out.records if r.category == cat]
        n_train = sum(r.split == "train" for r in recs)
        assert abs(n_train - fraction * len(recs)) <= 1


def test_split_errors():
    with pytest.raises(dm.EmptyManifest):
        dm.split(manifest_of({}), 0.75)
    with pytest.raises(ValueError):
        dm.split(manifest_of({"lamp": 3}), 1.0)


# manifests

def test_manifest_round_trip(tmp_path):
    LAMP.save(tmp_path / "lamp.json")
    m = Manifest([Record("a.png", "lamp", "train"), Record("b.png", "lamp", "test")], {"lamp": LAMP},
                 tmp_path, {"lamp": "lamp.json"})
    path = m.save()
    back = Manifest.load(path)
    assert back.records == m.records and back.specs == m.specs
    assert Manifest.load(tmp_path).records == m.records
    assert back.select("test") == [Record("b.png", "lamp", "test")]


def test_manifest_validation(tmp_path):
    with pytest.raises(dm.ManifestError):
        Manifest([Record("a.png", "lamp"), Record("a.png", "lamp")], {"lamp": LAMP})
    with pytest.raises(dm.ManifestError):
        Manifest([Record("a.png", "chair")], {"lamp": LAMP})
    with pytest.raises(dm.ManifestError):
        Manifest([Record("a.png", "lamp", "validation")], {"lamp": LAMP})
    with pytest.raises(dm.ManifestError):
        Manifest.load(tmp_path / "nothing.json")


def test_label_space():
    space = dm.LabelSpace({"rifle": dm.TEMPLATE_SPECS["rifle"], "lamp": LAMP, "chair": dm.TEMPLATE_SPECS["chair"]})
    assert space.offsets == {"chair": 0, "lamp": 4, "rifle": 7}
    assert space.num_classes == 11
    np.testing.assert_array_equal(space.to_global("lamp", [0, 2]), [4, 6])
    np.testing.assert_array_equal(space.to_local("lamp", [4, 6, 0, 9]), [0, 2, -1, -1])


# synthetic corpus

@pytest.mark.parametrize("template,n_colors", [("lamp", 3), ("chair", 4), ("rifle", 4)])
def test_template_has_every_component(template, n_colors):
    img = dm.render_synthetic(template, np.random.default_rng(5), 256)
    colors = {tuple(c) for c in img.pixels[img.foreground()]}
    assert colors == {tuple(c) for c in dm.TEMPLATE_SPECS[template].colors}
    assert len(colors) == n_colors


def test_gen_lamp_single(tmp_path):
    m = dm.gen_synthetic(SynthConfig("lamp", 1, seed=0, canvas=128), tmp_path)
    img = load_sketch(tmp_path / m.records[0].path, LAMP)
    assert len({tuple(c) for c in img.pixels[img.foreground()]}) == 3


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_gen_deterministic(tmp_path):
    cfg = SynthConfig("lamp", 200, seed=7, canvas=96)
    dm.gen_synthetic(cfg, tmp_path / "a")
    dm.gen_synthetic(cfg, tmp_path / "b")
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_gen_corpus_passes_pipeline(tmp_path):
    for template in dm.TEMPLATE_SPECS:
        dm.gen_synthetic(SynthConfig(template, 12, seed=1, canvas=160), tmp_path)
    m = Manifest.load(tmp_path)
    assert m.categories == ["chair", "lamp", "rifle"] and len(m.records) == 36
    for r in m.records:
        spec = m.specs[r.category]
        lps = extract_points(preprocess(load_sketch(m.root / r.path, spec), 160), spec, 128)
        assert set(np.unique(lps.labels[:lps.n_original])) <= set(range(spec.num_components))


def test_synth_config_validation():
    for kwargs in (dict(template="boat"), dict(count=0), dict(canvas=32)):
        with pytest.raises(ValueError):
            SynthConfig(**kwargs)


# preprocessing cache

@pytest.fixture
def corpus(tmp_path):
    return dm.gen_synthetic(SynthConfig("lamp", 6, seed=2, canvas=128), tmp_path)


def test_cache_round_trip(corpus):
    rec = corpus.records[0]
    path = corpus.root / rec.path
    fresh = dm.load_points(path, LAMP, 64, 128, use_cache=False)
    first = dm.load_points(path, LAMP, 64, 128)
    sidecar = path.with_name(path.name + ".n64.c128.pts")
    assert sidecar.exists()
    cached = dm.load_points(path, LAMP, 64, 128)
    for a in (first, cached):
        np.testing.assert_array_equal(a.points, fresh.points)
        np.testing.assert_array_equal(a.labels, fresh.labels)
        assert a.n_original == fresh.n_original


def test_cache_layout(corpus):
    lps = dm.load_points(corpus.root / corpus.records[0].path, LAMP, 32, 128, use_cache=False)
    raw = dm.encode_points(lps, 1234, 128)
    assert raw[:4] == b"MCPP" and len(raw) == 4 + 20 + 32 * 8 + 32 * 4 + 4
    back, crc, canvas = dm.decode_points(raw)
    assert (crc, canvas) == (1234, 128)
    np.testing.assert_array_equal(back.points, lps.points)
    with pytest.raises(ValueError):
        dm.decode_points(raw[:-1] + bytes([raw[-1] ^ 1]))


def test_cache_invalidated_by_new_image(corpus):
    a, b = (corpus.root / r.path for r in corpus.records[:2])
    dm.load_points(a, LAMP, 64, 128)
    a.write_bytes(b.read_bytes())
    got = dm.load_points(a, LAMP, 64, 128)
    np.testing.assert_array_equal(got.points, dm.load_points(b, LAMP, 64, 128, use_cache=False).points)


def test_corrupt_cache_is_rebuilt(corpus):
    path = corpus.root / corpus.records[0].path
    dm.load_points(path, LAMP, 64, 128)
    sidecar = path.with_name(path.name + ".n64.c128.pts")
    sidecar.write_bytes(b"MCPP garbage")
    fresh = dm.load_points(path, LAMP, 64, 128)
    np.testing.assert_array_equal(fresh.points, dm.load_points(path, LAMP, 64, 128, use_cache=False).points)


def test_load_samples_by_split(corpus):
    train = dm.load_samples(corpus, "train", 64, 128)
    test = dm.load_samples(corpus, "test", 64, 128)
    assert len(train) + len(test) == 6 and len(train) == 5  # 4.5 rounds half up
    assert all(s.category == "lamp" and len(s.points) == 64 for s in train + test)


# batching

def test_batches_sizes():
    data = list(range(25))
    assert [len(b) for b in dm.batches(data, 10, 0)] == [10, 10, 5]
    assert [len(b) for b in dm.batches(data, 1, 0)] == [1] * 25


@pytest.mark.parametrize("seed", [0, 1, (3, 4)])
def test_batches_partition_dataset(seed):
    data = list(range(37))
    out = [x for b in dm.batches(data, 6, seed) for x in b]
    assert sorted(out) == data
    assert out == [x for b in dm.batches(data, 6, seed) for x in b]


def test_batches_reshuffle_per_epoch():
    data = list(range(30))
    first = [x for b in dm.batches(data, 10, (0, 1)) for x in b]
    second = [x for b in dm.batches(data, 10, (0, 2)) for x in b]
    assert first != second
