import json

import numpy as np
import pytest

from ctn.contour import Contour, hausdorff, iou, rasterize, self_intersects
from ctn.dataio import (
    Dataset,
    PartialCorrection,
    Sample,
    generate_synthetic,
    load_corrections_file,
    load_dataset,
    read_image,
    save_corrections_file,
    save_dataset,
    select_exemplar,
    simulate_corrections,
    write_image,
)
from ctn.errors import DataError
from ctn.losses import PerceptualExtractor


def circle(n=32, r=12.0, c=32.0):
    th = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return np.stack([c + r * np.cos(th), c + r * np.sin(th)], 1)


class TestGenerateSynthetic:
    def test_deterministic(self):
        a = generate_synthetic(count=4, size=48, noise=0.02, seed=9)
        b = generate_synthetic(count=4, size=48, noise=0.02, seed=9)
        assert a.ids() == b.ids()
        for sa, sb in zip(a.samples, b.samples):
            assert np.array_equal(sa.image, sb.image)
        for lid in a.labeled_ids():
            assert np.array_equal(a.ground_truth(lid).points, b.ground_truth(lid).points)

    def test_noise_free_plateau_values(self):
        ds = generate_synthetic(count=2, size=48, noise=0.0, seed=3)
        for s in ds.samples:
            gt = ds.ground_truth(s.id)
            mask = rasterize(gt, 48, 48)
            # pixels far from the boundary sit exactly on the plateaus
            ys, xs = np.mgrid[0:48, 0:48]
            pix = np.stack([xs.ravel(), ys.ravel()], 1).astype(float)
            d = np.sqrt(((pix[:, None, :] - gt.points[None, :, :]) ** 2).sum(2)).min(1).reshape(48, 48)
            deep_in = mask & (d > 4.0)
            deep_out = (~mask) & (d > 4.0)
            # plateaus are exact on the 16-bit grid images live on
            assert np.all(s.image[deep_in] == np.round(0.25 * 65535) / 65535)
            assert np.all(s.image[deep_out] == np.round(0.75 * 65535) / 65535)

    def test_mask_contour_consistency(self):
        ds = generate_synthetic(count=6, size=64, noise=0.02, seed=5)
        for s in ds.samples:
            gt = ds.ground_truth(s.id)
            rendered = s.image < 0.5
            assert iou(rendered, rasterize(gt, 64, 64)) > 0.98

    def test_contours_simple(self):
        for seed in range(6):
            ds = generate_synthetic(count=3, size=64, noise=0.0, seed=seed)
            for lid in ds.labeled_ids():
                assert not self_intersects(ds.ground_truth(lid))

    def test_count_validation(self):
        with pytest.raises(DataError):
            generate_synthetic(count=1)


class TestImageIO:
    def test_png_16bit_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        img = np.round(rng.uniform(0, 1, (20, 24)) * 65535) / 65535
        p = tmp_path / "x.png"
        write_image(p, img)
        assert np.array_equal(read_image(p), img)

    def test_pgm_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        img = np.round(rng.uniform(0, 1, (10, 12)) * 255) / 255
        p = tmp_path / "x.pgm"
        write_image(p, img)
        assert np.allclose(read_image(p), img, atol=1e-12)

    def test_rgb_rejected(self, tmp_path):
        from PIL import Image

        p = tmp_path / "rgb.png"
        Image.new("RGB", (8, 8), (10, 20, 30)).save(p)
        with pytest.raises(DataError, match="single-channel"):
            read_image(p)


class TestDatasetRoundtrip:
    def test_save_load_identity(self, tmp_path):
        ds = generate_synthetic(count=4, size=32, noise=0.03, seed=11)
        ds.exemplar_id = ds.ids()[1]
        ds.samples[0].corrections = [
            PartialCorrection(ds.ids()[0], np.array([[1.5, 2.5], [3.25, 4.75]]), author="human"),
            PartialCorrection(ds.ids()[0], circle(8), author="simulated", closed=True,
                              created_at="2024-05-01T10:00:00Z"),
        ]
        root = tmp_path / "ds"
        save_dataset(ds, root)
        back = load_dataset(root)
        assert back.ids() == ds.ids()
        assert back.exemplar_id == ds.exemplar_id
        for a, b in zip(ds.samples, back.samples):
            assert np.array_equal(a.image, b.image)
            assert len(a.corrections) == len(b.corrections)
            for ca, cb in zip(a.corrections, b.corrections):
                assert np.array_equal(ca.points, cb.points)
                assert (ca.author, ca.closed, ca.created_at) == (cb.author, cb.closed, cb.created_at)
        for lid in ds.labeled_ids():
            assert np.array_equal(back.ground_truth(lid).points, ds.ground_truth(lid).points)
        # second save is byte-stable
        root2 = tmp_path / "ds2"
        save_dataset(back, root2)
        for rel in ["meta.json", "images/img_000.png", "labels/img_000.contour.json"]:
            assert (root / rel).read_bytes() == (root2 / rel).read_bytes()

    def test_duplicate_ids_rejected(self, tmp_path):
        root = tmp_path / "d"
        (root / "images").mkdir(parents=True)
        write_image(root / "images" / "a.png", np.full((8, 8), 0.5))
        write_image(root / "images" / "a.pgm", np.full((8, 8), 0.5))
        with pytest.raises(DataError, match="duplicate"):
            load_dataset(root)

    def test_label_without_image_rejected(self):
        with pytest.raises(DataError, match="no matching image"):
            Dataset([Sample("a", np.zeros((8, 8)))], labels={"b": Contour(circle())})

    def test_empty_labels_ok(self, tmp_path):
        root = tmp_path / "d"
        (root / "images").mkdir(parents=True)
        write_image(root / "images" / "a.png", np.full((8, 8), 0.5))
        ds = load_dataset(root)
        assert ds.labeled_ids() == []

    def test_quarantine_paths(self):
        ds = generate_synthetic(count=3, size=32, seed=2)
        with pytest.raises(DataError, match="no exemplar"):
            ds.exemplar_label()
        ds.exemplar_id = ds.ids()[0]
        assert len(ds.exemplar_label()) == 64
        assert len(ds.ground_truth(ds.ids()[2])) == 64

    def test_corrections_file_schema(self, tmp_path):
        p = tmp_path / "a.corrections.json"
        segs = [PartialCorrection("a", np.array([[1.0, 2.0], [3.0, 4.0]]))]
        save_corrections_file(p, "a", segs)
        payload = json.loads(p.read_text())
        assert payload["image"] == "a"
        assert payload["segments"][0]["points"] == [[1.0, 2.0], [3.0, 4.0]]
        back = load_corrections_file(p, "a")
        assert np.array_equal(back[0].points, segs[0].points)
        with pytest.raises(DataError, match="image field"):
            load_corrections_file(p, "b")


class TestSelectExemplar:
    def test_duplicate_wins(self):
        rng = np.random.default_rng(20)
        imgs = [rng.uniform(0, 1, (16, 16)) for _ in range(3)]
        samples = [
            Sample("m", imgs[0]),
            Sample("p", imgs[1]),
            Sample("q", imgs[1].copy()),  # duplicate of p
            Sample("z", imgs[2]),
        ]
        picked = select_exemplar(Dataset(samples))
        assert picked in ("p", "q")

    def test_two_images_tie_lexicographic(self):
        rng = np.random.default_rng(21)
        img = rng.uniform(0, 1, (16, 16))
        ds = Dataset([Sample("b", img + 0.0), Sample("a", img + 0.0)])
        assert select_exemplar(ds) == "a"

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(22)
        samples = [Sample(f"s{i}", rng.uniform(0, 1, (16, 16))) for i in range(10)]
        ds = Dataset(samples)
        ex = PerceptualExtractor.default()
        feats = []
        for s in ds.samples:
            lv = ex.extract(s.image)
            feats.append(np.concatenate([l.fmap.mean(axis=(1, 2)) for l in lv]))
        sums = [sum(np.linalg.norm(f - g) for g in feats) for f in feats]
        assert select_exemplar(ds, ex) == ds.samples[int(np.argmin(sums))].id

    def test_order_invariant(self):
        rng = np.random.default_rng(23)
        samples = [Sample(f"s{i}", rng.uniform(0, 1, (16, 16))) for i in range(5)]
        a = select_exemplar(Dataset(samples))
        b = select_exemplar(Dataset(list(reversed(samples))))
        assert a == b

    def test_needs_two(self):
        with pytest.raises(DataError):
            select_exemplar(Dataset([Sample("a", np.zeros((16, 16)))]))


class TestSimulateCorrections:
    def make_pairs(self, rng, count=10):
        preds, gts = {}, {}
        for i in range(count):
            sid = f"img_{i:03d}"
            gt = circle(n=40, r=12 + i * 0.1)
            shift = rng.uniform(0, 6)
            preds[sid] = Contour(gt + [shift, 0.0])
            gts[sid] = Contour(gt)
        return preds, gts

    def test_fraction_zero_empty(self):
        rng = np.random.default_rng(30)
        preds, gts = self.make_pairs(rng)
        assert simulate_corrections(preds, gts, 0.0) == {}

    def test_perfect_predictions_partial_empty(self):
        gts = {f"i{k}": Contour(circle(n=30, r=10 + k)) for k in range(4)}
        preds = {k: Contour(v.points.copy()) for k, v in gts.items()}
        assert simulate_corrections(preds, gts, 1.0, mode="partial") == {}

    def test_worst_three_of_ten(self):
        rng = np.random.default_rng(31)
        preds, gts = self.make_pairs(rng)
        hds = {k: hausdorff(preds[k], gts[k]) for k in preds}
        manual = sorted(preds, key=lambda k: (-hds[k], k))[:3]  # ceil(0.25*10)=3
        out = simulate_corrections(preds, gts, 0.25, mode="full")
        assert sorted(out) == sorted(manual)
        for sid, segs in out.items():
            assert len(segs) == 1 and segs[0].closed
            assert np.array_equal(segs[0].points, gts[sid].points)

    def test_partial_marks_bad_arcs(self):
        gt = circle(n=60, r=15.0)
        pred = gt.copy()
        pred[10:20] += [8.0, 0.0]  # one bad stretch
        out = simulate_corrections({"a": Contour(pred)}, {"a": Contour(gt)}, 1.0,
                                   mode="partial", tau=3.0)
        segs = out["a"]
        assert len(segs) >= 1
        marked = np.concatenate([s.points for s in segs])
        # corrections are gt points near the displaced stretch
        from scipy.spatial import cKDTree

        d = cKDTree(gt[8:22]).query(marked)[0]
        assert d.max() < 3.0
        for s in segs:
            assert s.points.shape[0] >= 2
            assert s.author == "simulated"

    def test_full_fraction_labels_everyone(self):
        rng = np.random.default_rng(32)
        preds, gts = self.make_pairs(rng, count=7)
        out = simulate_corrections(preds, gts, 1.0, mode="full")
        assert sorted(out) == sorted(preds)

    def test_id_mismatch(self):
        rng = np.random.default_rng(33)
        preds, gts = self.make_pairs(rng, count=3)
        gts.pop(sorted(gts)[0])
        with pytest.raises(DataError, match="ids differ"):
            simulate_corrections(preds, gts, 0.5)
