import hashlib
import json

import numpy as np
import pytest

from fsod.datasets import (DEFAULT_CATALOGUE, DIOR_CLASSES, NWPU_CLASSES, DatasetSpec, ShotConfig, SplitSpec,
                           filter_classes, generate_synthetic, load_dataset, make_split, parse_nwpu,
                           parse_voc_xml, render_image, sample_k_shot, save_dataset, write_manifest)
from fsod.errors import ConfigError, ParseError, SamplingError


# 99.9% quantile of the chi-square distribution with 7 degrees of freedom
CHI2_7DF_999 = 24.322


def _digest(ds):
    h = hashlib.sha256()
    for im in ds.images:
        h.update(im.image.tobytes())
        h.update(im.boxes.tobytes())
        h.update("|".join(im.classes).encode())
    return h.hexdigest()


def test_generation_is_deterministic():
    spec = DatasetSpec(num_images=12, seed=5)
    assert _digest(generate_synthetic(spec)) == _digest(generate_synthetic(spec))
    assert _digest(generate_synthetic(spec, seed=6)) != _digest(generate_synthetic(spec))


def test_per_image_seeds_are_independent_of_count():
    a = generate_synthetic(DatasetSpec(num_images=3, seed=2))
    b = render_image(DatasetSpec(num_images=50, seed=2), 2)
    assert np.array_equal(a.images[2].image, b.image)


def test_fixed_object_count_and_valid_boxes():
    ds = generate_synthetic(DatasetSpec(num_images=20, objects_per_image=[3, 3], scale_range=[8, 24], seed=1))
    for im in ds.images:
        assert len(im.boxes) == 3
        assert im.image.shape == (128, 128, 3) and im.image.dtype == np.uint8
        b = im.boxes
        assert np.all(b[:, 2] > b[:, 0]) and np.all(b[:, 3] > b[:, 1])
        assert np.all(b >= 0) and np.all(b <= 128)
        assert set(im.classes) <= set(DEFAULT_CATALOGUE)


def test_class_frequency_uniform():
    ds = generate_synthetic(DatasetSpec(num_images=1000, seed=3, image_size=64, scale_range=[8, 24]))
    counts = np.array([ds.class_counts()[c] for c in DEFAULT_CATALOGUE])
    share = counts / counts.sum()
    assert np.all(np.abs(share - 1 / 8) <= 0.05)
    expected = counts.sum() / 8
    stat = float(((counts - expected) ** 2 / expected).sum())
    assert stat < CHI2_7DF_999


def test_spec_validation():
    with pytest.raises(ConfigError, match="at least 2"):
        DatasetSpec(classes=["circle-solid"])
    with pytest.raises(ConfigError, match="unknown synthetic class"):
        DatasetSpec(classes=["circle-solid", "blob-solid"])
    with pytest.raises(ConfigError):
        DatasetSpec(scale_range=[8, 500])


def test_paper_splits_verbatim():
    s = make_split("dior-1")
    assert s.novel == ("baseball field", "basketball court", "bridge", "chimney", "ship")
    assert len(s.base) == 15 and set(s.base) | set(s.novel) == set(DIOR_CLASSES)
    n = make_split("nwpu")
    assert set(n.novel) == {"airplane", "baseball diamond", "tennis court"}
    assert set(n.base) | set(n.novel) == set(NWPU_CLASSES)


@pytest.mark.parametrize("sid", ["dior-1", "dior-2", "dior-3", "dior-4", "nwpu", "synthetic"])
def test_every_split_disjoint(sid):
    s = make_split(sid)
    assert not set(s.base) & set(s.novel)


def test_synthetic_split_last_m_novel():
    s = make_split("synthetic")
    assert s.novel == DEFAULT_CATALOGUE[-2:]
    assert len(s.base) == 6
    assert make_split("synthetic", num_novel=3).novel == DEFAULT_CATALOGUE[-3:]


def test_split_errors():
    with pytest.raises(ConfigError, match="options"):
        make_split("coco")
    with pytest.raises(ConfigError, match="overlap"):
        SplitSpec(("a", "b"), ("b",))
    with pytest.raises(ConfigError):
        ShotConfig(0)


def _count(ds, classes):
    counts = {c: 0 for c in classes}
    for im in ds.images:
        for c in im.classes:
            counts[c] += 1
    return counts


@pytest.fixture(scope="module")
def pool():
    return generate_synthetic(DatasetSpec(num_images=200, seed=21))


@pytest.mark.parametrize("k", [3, 5, 10, 20])
def test_k_shot_exactly_k(pool, k):
    classes = list(DEFAULT_CATALOGUE)
    sub = sample_k_shot(pool, classes, k, seed=4)
    assert _count(sub, classes) == {c: k for c in classes}
    # surplus instances were masked, not dropped
    originals = {im.source_id: im for im in pool.images}
    for im in sub.images:
        assert len(im.boxes) + len(im.ignore) == len(originals[im.source_id].boxes)


def test_k_shot_single_object_images():
    ds = generate_synthetic(DatasetSpec(num_images=120, objects_per_image=[1, 1], seed=8))
    sub = sample_k_shot(ds, list(DEFAULT_CATALOGUE), 3, seed=0)
    assert len(sub) == 3 * 8


def test_k_shot_seeded(pool):
    a = sample_k_shot(pool, list(DEFAULT_CATALOGUE), 5, seed=1)
    b = sample_k_shot(pool, list(DEFAULT_CATALOGUE), 5, seed=1)
    c = sample_k_shot(pool, list(DEFAULT_CATALOGUE), 5, seed=2)
    ids = lambda d: [im.source_id for im in d.images]
    assert ids(a) == ids(b)
    assert ids(a) != ids(c)


def test_k_shot_insufficient(pool):
    with pytest.raises(SamplingError, match="circle-solid"):
        sample_k_shot(pool.subset(range(3)), ["circle-solid"], 50)


def test_filter_classes(pool):
    split = make_split("synthetic")
    base = filter_classes(pool, split.base)
    assert all(set(im.classes) <= set(split.base) for im in base.images)


VOC = """<annotation><filename>00001.jpg</filename>
<object><name>ship</name><bndbox><xmin>10</xmin><ymin>20</ymin><xmax>30</xmax><ymax>40</ymax></bndbox></object>
</annotation>"""


def test_voc_conversion():
    im = parse_voc_xml(VOC)
    assert im.boxes.tolist() == [[9.0, 19.0, 30.0, 40.0]]
    assert im.classes == ["ship"]
    assert im.source_id == "00001.jpg"


def test_voc_empty_and_aliases(tmp_path):
    assert len(parse_voc_xml("<annotation><filename>x</filename></annotation>").boxes) == 0
    p = tmp_path / "a.xml"
    p.write_text(VOC.replace("ship", "baseballfield"))
    assert parse_voc_xml(p).classes == ["baseball field"]


def test_voc_errors():
    with pytest.raises(ParseError, match="object 0"):
        parse_voc_xml(VOC.replace("<xmax>30</xmax>", "<xmax>10</xmax>"))
    with pytest.raises(ParseError, match=r"object\[0\]/bndbox/ymax"):
        parse_voc_xml(VOC.replace("<ymax>40</ymax>", ""))
    with pytest.raises(ParseError, match="malformed"):
        parse_voc_xml("<annotation>")


def test_nwpu_parse(tmp_path):
    im = parse_nwpu("(563,478),(630,573),1\n")
    assert im.boxes.tolist() == [[563.0, 478.0, 630.0, 573.0]]
    assert im.classes == ["airplane"] and im.meta["class_ids"] == [1]
    assert len(parse_nwpu("\n  \n").boxes) == 0
    assert parse_nwpu(" ( 1 , 2 ) , ( 3 , 4 ) , 5 ").classes == ["tennis court"]
    p = tmp_path / "001.txt"
    p.write_text("(1,2),(3,4),2\n")
    assert parse_nwpu(p).source_id == "001"


def test_nwpu_errors():
    with pytest.raises(ParseError, match="x2 <= x1"):
        parse_nwpu("(5,5),(4,9),2")
    with pytest.raises(ParseError, match="line 2"):
        parse_nwpu("(1,1),(2,2),1\n(1,1),(2,2)\n")
    with pytest.raises(ParseError, match="class id 11"):
        parse_nwpu("(1,1),(2,2),11")


def test_save_load_round_trip_and_bytes(tmp_path):
    ds = sample_k_shot(generate_synthetic(DatasetSpec(num_images=30, seed=2)), ["circle-solid"], 3)
    p1 = save_dataset(ds, tmp_path / "a", config={"seed": 2})
    p2 = save_dataset(ds, tmp_path / "b", config={"seed": 2})
    assert p1.read_bytes() == p2.read_bytes()
    m1 = write_manifest(tmp_path / "a", sorted((tmp_path / "a").rglob("*.png")) + [p1], {"seed": 2})
    m2 = write_manifest(tmp_path / "b", sorted((tmp_path / "b").rglob("*.png")) + [p2], {"seed": 2})
    assert m1.read_bytes() == m2.read_bytes()
    back = load_dataset(p1)
    assert _digest(back) == _digest(ds)
    assert all(np.array_equal(a.ignore, b.ignore) for a, b in zip(back.images, ds.images))
    assert json.loads(p1.read_text())["config"] == {"seed": 2}
