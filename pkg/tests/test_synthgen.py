import csv
import filecmp
from collections import Counter

import numpy as np
import pytest
from PIL import Image

from lesioncascade.dataio import load_cls_manifest, load_seg_manifest
from lesioncascade.metrics import dice_score
from lesioncascade.synthgen import (SKIN, HAM10000_COUNTS, SynthConfig, generate_cls_dataset, generate_seg_dataset,
                                    proportional_counts, read_sidecar, render_arrays)


def analytic_disk(shape, center, radius):
    out = np.zeros(shape, np.uint8)
    for r in range(shape[0]):
        for c in range(shape[1]):
            if (r - center[0]) ** 2 + (c - center[1]) ** 2 <= radius ** 2:
                out[r, c] = 1
    return out


def peak_frequency(img, region):
    """Radial frequency (cycles/pixel) of the strongest spectral peak inside ``region``."""
    g = img.mean(-1)
    x = np.where(region, g - g[region].mean(), 0.0)
    spec = np.abs(np.fft.fft2(x, s=(256, 256)))
    spec[0, 0] = 0
    f = np.fft.fftfreq(256)
    radial = np.hypot(f[:, None], f[None, :])
    return radial[np.unravel_index(np.argmax(spec), spec.shape)]


def mutual_information(a, b):
    joint = Counter(zip(a, b))
    pa, pb, n = Counter(a), Counter(b), len(a)
    return sum(c / n * np.log(c * n / (pa[x] * pb[y])) for (x, y), c in joint.items())


def test_masks_match_analytic_disks(tmp_path):
    root = generate_seg_dataset(SynthConfig(n_samples=8, image_size=(48, 40), seed=2), tmp_path)
    side = read_sidecar(root)
    assert len(side["samples"]) == 8
    for rec in side["samples"]:
        mask = (np.asarray(Image.open(root / "masks" / f"{rec['stem']}.png")) > 127).astype(np.uint8)
        les = rec["lesion"]
        assert les["radii"][0] == les["radii"][1]
        oracle = analytic_disk((48, 40), les["center"], les["radii"][0])
        assert dice_score(mask, oracle) == 1.0
        assert mask.sum() > 0
        # lesion fits: border rows and columns are clear
        assert not mask[0].any() and not mask[-1].any() and not mask[:, 0].any() and not mask[:, -1].any()


def test_histograms_disjoint():
    x, m, _ = render_arrays(SynthConfig(n_samples=6, seed=4), labeled=False)
    for img, mask in zip(x, m[..., 0].astype(bool)):
        red = img[..., 0]
        assert red[mask].max() < red[~mask].min()
        np.testing.assert_allclose(img[~mask], np.broadcast_to(SKIN, img[~mask].shape), atol=1 / 255)


def test_generation_deterministic(tmp_path):
    cfg = SynthConfig(n_samples=5, seed=9, distractor_strength=0.7, background_noise=0.05, lesion_shape="ellipse")
    a = generate_cls_dataset(cfg, tmp_path / "a")
    b = generate_cls_dataset(cfg, tmp_path / "b")
    cmp = filecmp.dircmp(a / "images", b / "images")
    assert not cmp.diff_files and len(cmp.same_files) == 5
    assert (a / "labels.csv").read_bytes() == (b / "labels.csv").read_bytes()
    assert (a / "synth_config.json").read_bytes() == (b / "synth_config.json").read_bytes()
    c = generate_cls_dataset(SynthConfig(n_samples=5, seed=10), tmp_path / "c")
    assert (a / "images" / "synth_00000.png").read_bytes() != (c / "images" / "synth_00000.png").read_bytes()


def test_seg_layout_loads(tmp_path):
    root = generate_seg_dataset(SynthConfig(n_samples=4, lesion_shape="ellipse"), tmp_path)
    assert len(load_seg_manifest(root)) == 4


def test_nearest_centroid_oracle():
    cfg = SynthConfig(n_samples=140, texture_classes=7, seed=1)
    x, m, y = render_arrays(cfg)
    f = np.array([peak_frequency(img, mask[..., 0].astype(bool)) for img, mask in zip(x, m)])
    fit, held = np.arange(140) % 2 == 0, np.arange(140) % 2 == 1
    centroids = np.array([f[fit & (y == k)].mean() for k in range(7)])
    pred = np.argmin(np.abs(f[held, None] - centroids[None]), axis=1)
    assert (pred == y[held]).mean() == 1.0


def test_background_carries_no_label():
    cfg = SynthConfig(n_samples=210, texture_classes=3, seed=3, distractor_strength=1.0)
    x, m, y = render_arrays(cfg)
    lesion_f, back_f = [], []
    for img, mask in zip(x, m[..., 0].astype(bool)):
        lesion_f.append(peak_frequency(img, mask))
        back_f.append(peak_frequency(img, ~mask))
    edges = [0.13, 0.33]
    lesion_bins = list(np.digitize(lesion_f, edges))
    back_bins = list(np.digitize(back_f, edges))
    labels = list(y)
    mi_lesion = mutual_information(lesion_bins, labels)
    mi_back = mutual_information(back_bins, labels)
    assert mi_lesion > 0.9 * np.log(3)
    perm = np.random.default_rng(0)
    null = [mutual_information(back_bins, list(perm.permutation(labels))) for _ in range(200)]
    assert mi_back <= np.quantile(null, 0.99)
    assert mi_back < 0.05 * mi_lesion


def test_cls_counts_and_rows(tmp_path):
    counts = [5, 1, 3]
    root = generate_cls_dataset(SynthConfig(n_samples=9, texture_classes=3, class_counts=counts), tmp_path)
    with open(root / "labels.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 9
    m = load_cls_manifest(root)
    assert m.class_counts == {"AKIEC": 5, "BCC": 1, "BKL": 3}


def test_proportional_counts():
    assert proportional_counts(10015) == list(HAM10000_COUNTS.values())
    small = proportional_counts(100)
    assert sum(small) == 100 and small[5] == max(small)


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(texture_classes=8)
    with pytest.raises(ValueError):
        SynthConfig(radius_fraction=(0.2, 0.5))
    with pytest.raises(ValueError):
        SynthConfig(n_samples=3, texture_classes=2, class_counts=[1, 1])
    with pytest.raises(ValueError):
        SynthConfig(lesion_shape="square")
