"""Acceptance suite: one test per release criterion, one printed verdict each.

Each test prints "acceptance N (<name>): PASS" on success; a failing
criterion shows up as the test's FAILED line plus the assertion detail.
"""

import math
import time
from pathlib import Path

import numpy as np

from sketchforge.curation import (
    ClassHistogram,
    assemble_class_pool,
    audit_pool,
    identify_tail_classes,
    sample_pretrain_set,
)
from sketchforge.datamodel import (
    BoundingBox,
    SketchSource,
    format_box_list,
    parse_box_list,
    parse_count_answer,
)
from sketchforge.evalmetrics import (
    DEFAULT_THRESHOLDS,
    build_sbir_gallery,
    detection_accuracy,
    mean_average_precision,
    rank_gallery,
    sbir_acc_at_k,
)
from sketchforge.instructions import (
    CompositionSpec,
    CorpusSources,
    build_finetune_corpus,
)
from sketchforge.kernels import dilate, morph_gradient, warmup
from sketchforge.sketchgen import (
    BACKGROUND,
    STROKE,
    MaskRaster,
    StylizerSpec,
    compose_instance_strokes,
    generate_sketch_raster,
)

from test_cli import (
    EXIT_OK,
    FIXTURES,
    corpus_world,
    gallery_world,
    run_cli,
    single_class_image,
    sketch,
    sketch_gen_world,
    supply_world,
    write_config,
    write_images,
)
from test_evalmetrics import (
    acc_oracle,
    close,
    map_oracle,
    perfect_scores,
    perfect_spec,
    rand_instance,
)


def verdict(n, name):
    print(f"acceptance {n} ({name}): PASS")


def test_criterion_1_metric_oracle_equivalence():
    rng = np.random.default_rng(2024)
    instances = [rand_instance(rng) for _ in range(1000)]
    start = time.perf_counter()
    got_acc = detection_accuracy(instances)
    got_map = mean_average_precision(instances)
    want_acc = acc_oracle(instances, DEFAULT_THRESHOLDS)
    want_map = map_oracle(instances, DEFAULT_THRESHOLDS)
    elapsed = time.perf_counter() - start
    for key in ("Acc", "Acc@0.5", "Acc_S", "Acc_M", "Acc_L"):
        assert close(got_acc[key], want_acc[key], 1e-9), (key, got_acc[key], want_acc[key])
    for key in ("mAP", "mAP@0.5", "mAP_S", "mAP_M", "mAP_L"):
        assert close(got_map[key], want_map[key], 1e-9), (key, got_map[key], want_map[key])
    assert elapsed < 10.0, f"metric evaluation took {elapsed:.1f}s"
    verdict(1, "metric oracle equivalence")


def test_criterion_2_sbir_protocol_fixtures():
    spec = perfect_spec()
    rankings = rank_gallery(spec, perfect_scores(spec))
    assert sbir_acc_at_k(rankings, spec, 1) == 100.0
    assert sbir_acc_at_k(rankings, spec, 5) == 100.0
    assert sbir_acc_at_k(rankings, spec, 10) == 50.0

    # every query retrieves exactly 3 of its 5 matches inside the top 5
    scores = {}
    for q, qc in spec.queries:
        same = [g for g, gc in spec.gallery if gc == qc]
        other = [g for g, gc in spec.gallery if gc != qc]
        for g, _ in spec.gallery:
            scores[(q, g)] = 0.0
        for g in same[:3]:
            scores[(q, g)] = 1.0
        for g in same[3:]:
            scores[(q, g)] = 0.1
        for g in other[:2]:
            scores[(q, g)] = 0.5
    assert sbir_acc_at_k(rank_gallery(spec, scores), spec, 5) == 60.0
    verdict(2, "retrieval protocol fixtures")


def test_criterion_3_gallery_shape():
    for n_classes, seed in ((20, 0), (25, 3), (39, 11), (60, 7)):
        images = []
        sketches = []
        for c in range(n_classes):
            images += [single_class_image(f"img-{c}-{i}", c) for i in range(6)]
            sketches += [sketch(f"sk-{c}-{s}", c) for s in range(7)]
        scores = {c: float(100 - c) for c in range(n_classes)}
        spec = build_sbir_gallery(scores, images, sketches, seed=seed)
        assert len(spec.classes) == 20
        assert len(spec.gallery) == 100
        assert len(spec.queries) == 100
        assert len(spec.gallery) * len(spec.queries) == 10000
    verdict(3, "gallery shape 20x(5+5)")


def _corpus_sources(n_images=300, n_classes=5, n_qa=80):
    images = [single_class_image(f"img-{i:04d}", i % n_classes) for i in range(n_images)]
    pool = {
        c: [sketch(f"sk-{c}-{i}", c) for i in range(6)] for c in range(n_classes)
    }
    qa = {
        f"img-{i:04d}": [("What is shown?", "An object.")] for i in range(n_qa)
    }
    return CorpusSources(
        images=images, sketch_pool=pool, qa_rounds=qa, sbir_images=images
    )


def test_criterion_4_composition_fidelity():
    sources = _corpus_sources()
    # one-thousandth of the published mix
    spec = CompositionSpec(detect_n=110, vqa_n=50, count_n=30, sbir_n=25)
    samples, report = build_finetune_corpus(spec, sources, seed=9)
    assert report.realized == {"BBOX": 110, "VQA": 50, "COUNT": 30, "SBIR": 25}
    assert not report.has_shortfall
    assert len(samples) == 215
    assert sorted((report.sbir_yes, report.sbir_no)) == [12, 13]

    # even sizes split exactly in half
    for n in (24, 250):
        spec = CompositionSpec(detect_n=10, vqa_n=10, count_n=10, sbir_n=n)
        _, report = build_finetune_corpus(spec, sources, seed=9)
        assert report.sbir_yes == n // 2 and report.sbir_no == n // 2
    verdict(4, "corpus composition fidelity")


def test_criterion_5_pool_conformance():
    rng = np.random.default_rng(77)
    sources = list(SketchSource)
    pools = {}
    availability = {}
    for class_id in range(40):
        # random supply regime: primary-only, shared, or starved
        supply: dict[SketchSource, list] = {}
        primary_n = int(rng.integers(0, 600))
        if primary_n:
            supply[SketchSource.SKETCHVCL_O365] = [
                sketch(f"p-{class_id}-{i}", class_id) for i in range(primary_n)
            ]
        for src in sources[1:]:
            if rng.random() < 0.4:
                n = int(rng.integers(1, 400))
                supply[src] = [
                    sketch(f"{src.value}-{class_id}-{i}", class_id, src)
                    for i in range(n)
                ]
        if not supply:
            supply[SketchSource.SKETCHVCL_O365] = [
                sketch(f"p-{class_id}-0", class_id)
            ]
        pools[class_id] = assemble_class_pool(class_id, supply, seed=5)
        availability[class_id] = {s: len(lst) for s, lst in supply.items()}

    audit = audit_pool(pools, availability=availability)
    assert audit.total_violations == 0, [
        (c.class_id, c.violations) for c in audit.classes if c.violations
    ]
    for c in audit.classes:
        total_avail = sum(availability[c.class_id].values())
        assert c.size >= min(200, total_avail)
    verdict(5, "sketch pool conformance")


def test_criterion_6_tail_balancing():
    hist = ClassHistogram(counts={1: 4999, 2: 5000, 3: 1, 5: 12000, 8: 4001})
    assert identify_tail_classes(hist, 5000) == {1, 3, 8}

    # two tail classes, ten images each; fills must stay within one of even
    images = [single_class_image(f"a-{i}", 100) for i in range(10)]
    images += [single_class_image(f"b-{i}", 101) for i in range(10)]
    images += [single_class_image(f"h-{i}", 200) for i in range(20)]
    hist = ClassHistogram(counts={100: 10, 101: 10, 200: 9000})
    for n_tail in (4, 7, 10, 13):
        selection = sample_pretrain_set(
            images, hist, n_head=0, n_tail=n_tail, threshold=5000, seed=3
        )
        counts = {}
        for _, cls in selection.pairs:
            counts[cls] = counts.get(cls, 0) + 1
        assert sum(counts.values()) == n_tail
        assert set(counts) <= {100, 101}
        assert max(counts.values()) - min(counts.values()) <= 1
    verdict(6, "tail set and round-robin balance")


def _scene(rng, size):
    img = rng.integers(0, 256, size=(size, size, 3)).astype(np.uint8)
    mask = np.zeros((size, size), dtype=bool)
    lo = size // 4
    hi = size - lo
    mask[lo:hi, lo:hi] = True
    return img, MaskRaster(mask)


def test_criterion_7_sketch_invariants():
    rng = np.random.default_rng(12)
    canvas = 128
    for _ in range(30):
        size = int(rng.integers(64, 160))
        img, mask = _scene(rng, size)
        out = generate_sketch_raster(img, mask, canvas=canvas)
        assert out.shape == (canvas, canvas)
        assert set(np.unique(out)) <= {STROKE, BACKGROUND}
        # out-of-mask pixels must not matter
        noisy = img.copy()
        outside = ~mask.data
        noisy[outside] = rng.integers(0, 256, size=(int(outside.sum()), 3)).astype(
            np.uint8
        )
        assert np.array_equal(generate_sketch_raster(noisy, mask, canvas=canvas), out)

    # flat field: nothing but the silhouette contour band can fire
    img = np.full((120, 120, 3), 150, dtype=np.uint8)
    mask = np.zeros((120, 120), dtype=bool)
    mask[30:90, 20:100] = True
    mask = MaskRaster(mask)
    spec = StylizerSpec()
    strokes = compose_instance_strokes(img, mask, spec)
    boundary = (
        morph_gradient(np.where(mask.data, np.uint8(255), np.uint8(0)), 1) > 0
    ).astype(np.uint8) * 255
    band = dilate(boundary, math.ceil(3.0 * spec.k * spec.sigma) + 1)
    assert np.any(strokes == STROKE)
    assert np.all(band[strokes == STROKE] == 255)

    # throughput: 1,000 full-size instances under a minute
    warmup()
    scenes = []
    scene_rng = np.random.default_rng(99)
    for _ in range(20):
        scenes.append(_scene(scene_rng, 512))
    start = time.perf_counter()
    for i in range(1000):
        img, mask = scenes[i % len(scenes)]
        generate_sketch_raster(img, mask, canvas=512)
    elapsed = time.perf_counter() - start
    assert elapsed < 60.0, f"1000 instances took {elapsed:.1f}s"
    verdict(7, f"sketch invariants ({elapsed:.1f}s per 1000 at 512)")


def _digest_outputs(paths):
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_file():
            out[str(p)] = p.read_bytes()
        elif p.is_dir():
            for f in sorted(p.rglob("*")):
                if f.is_file():
                    out[str(f)] = f.read_bytes()
    return out


def test_criterion_8_worker_determinism(tmp_path):
    worlds = {}
    # each world gets its own directory: the builders share file names
    for sub in ("sg", "corpus", "gal"):
        (tmp_path / sub).mkdir()

    # sketch-gen
    manifest, images_dir, masks_dir = sketch_gen_world(tmp_path / "sg")
    sk_out = tmp_path / "sketches.jsonl"
    sk_dir = tmp_path / "sk_out"
    worlds["sketch-gen"] = (
        write_config(
            tmp_path,
            name="c_sketch.json",
            paths={
                "images": str(manifest),
                "images_dir": str(images_dir),
                "masks_dir": str(masks_dir),
                "out_dir": str(sk_dir),
                "out": str(sk_out),
            },
            params={"canvas": 64},
        ),
        (),
        [sk_out, sk_dir, Path(str(sk_out) + ".manifest.json")],
    )

    # curate-pretrain
    cp_images = write_images(
        tmp_path / "cp_images.jsonl",
        [single_class_image(f"img-{i:02d}", i % 2) for i in range(20)],
    )
    cp_out = tmp_path / "selection.jsonl"
    worlds["curate-pretrain"] = (
        write_config(
            tmp_path,
            name="c_curate.json",
            seed=4,
            paths={"images": str(cp_images), "out": str(cp_out)},
            params={"n_head": 6, "n_tail": 4, "tail_threshold": 100},
        ),
        (),
        [cp_out, Path(str(cp_out) + ".manifest.json")],
    )

    # mix-build + mix-audit
    supply = supply_world(tmp_path)
    pool_out = tmp_path / "pool.jsonl"
    worlds["mix-build"] = (
        write_config(
            tmp_path,
            name="c_mix.json",
            seed=3,
            paths={"sketches": str(supply), "out": str(pool_out)},
        ),
        (),
        [pool_out, Path(str(pool_out) + ".manifest.json")],
    )
    audit_out = tmp_path / "audit.json"
    worlds["mix-audit"] = (
        write_config(
            tmp_path,
            name="c_audit.json",
            paths={"pool": str(pool_out), "sketches": str(supply), "out": str(audit_out)},
        ),
        (),
        [audit_out, Path(str(audit_out) + ".manifest.json")],
    )

    # instr-build
    images_path, pool_path, qa_path = corpus_world(tmp_path / "corpus")
    corpus_out = tmp_path / "corpus.jsonl"
    worlds["instr-build"] = (
        write_config(
            tmp_path,
            name="c_instr.json",
            seed=5,
            paths={
                "images": str(images_path),
                "pool": str(pool_path),
                "qa": str(qa_path),
                "out": str(corpus_out),
            },
            params={"detect_n": 11, "vqa_n": 5, "count_n": 3, "sbir_n": 4},
        ),
        (),
        [
            corpus_out,
            tmp_path / "corpus.report.json",
            tmp_path / "corpus.report.csv",
            Path(str(corpus_out) + ".manifest.json"),
        ],
    )

    # gallery-build
    g_images, g_sketches, g_scores = gallery_world(tmp_path / "gal")
    gallery_out = tmp_path / "gallery.json"
    worlds["gallery-build"] = (
        write_config(
            tmp_path,
            name="c_gallery.json",
            seed=11,
            paths={
                "images": str(g_images),
                "sketches": str(g_sketches),
                "scores": str(g_scores),
                "out": str(gallery_out),
            },
        ),
        (),
        [gallery_out, Path(str(gallery_out) + ".manifest.json")],
    )

    # score (counting fixture)
    score_out = tmp_path / "score.json"
    worlds["score"] = (
        write_config(
            tmp_path,
            name="c_score.json",
            paths={
                "truth": str(FIXTURES / "counting" / "truth.jsonl"),
                "preds": str(FIXTURES / "counting" / "preds.jsonl"),
                "out": str(score_out),
            },
        ),
        ("--task", "count"),
        [score_out, Path(str(score_out) + ".manifest.json")],
    )

    # report (merges the score output; runs after score in the loop below)
    table_csv = tmp_path / "table.csv"
    table_md = tmp_path / "table.md"
    worlds["report"] = (
        write_config(
            tmp_path,
            name="c_report.json",
            paths={
                "reports": [str(score_out)],
                "out_csv": str(table_csv),
                "out_md": str(table_md),
            },
        ),
        (),
        [table_csv, table_md, Path(str(table_csv) + ".manifest.json")],
    )

    order = [
        "sketch-gen",
        "curate-pretrain",
        "mix-build",
        "mix-audit",
        "instr-build",
        "gallery-build",
        "score",
        "report",
    ]
    baselines = {}
    for workers in (1, 4, 8):
        for name in order:
            cfg, extra, outputs = worlds[name]
            code = run_cli(name, "--config", cfg, "--workers", workers, *extra)
            assert code == EXIT_OK, (name, workers, code)
            got = _digest_outputs(outputs)
            assert got, name
            if workers == 1:
                baselines[name] = got
            else:
                assert got == baselines[name], f"{name} differs at workers={workers}"
    verdict(8, "byte-identical outputs across workers 1/4/8")


def test_criterion_9_parser_round_trips():
    rng = np.random.default_rng(41)
    # box lists: format then parse, each coordinate within half a quantum
    tol = 0.5 * 10**-2 + 1e-12
    for _ in range(5000):
        n = int(rng.integers(1, 6))
        boxes = []
        for _ in range(n):
            x = np.sort(rng.random(2))
            y = np.sort(rng.random(2))
            while x[1] - x[0] < 0.02 or y[1] - y[0] < 0.02:
                x = np.sort(rng.random(2))
                y = np.sort(rng.random(2))
            boxes.append(BoundingBox(float(x[0]), float(y[0]), float(x[1]), float(y[1])))
        parsed = parse_box_list(format_box_list(boxes))
        assert len(parsed.boxes) == len(boxes)
        assert not parsed.dropped and not parsed.pixel_boxes
        for got, want in zip(parsed.boxes, boxes):
            for a, b in zip(got.as_tuple(), want.as_tuple()):
                assert abs(a - b) <= tol

    # count answers embedded in varied phrasings
    templates = (
        "{n}",
        "There are {n} objects.",
        "Answer: {n}.",
        "I see {n}, maybe more.",
        "count = {n}",
    )
    for i in range(5000):
        n = int(rng.integers(0, 10**6))
        text = templates[i % len(templates)].format(n=n)
        assert parse_count_answer(text) == n
    verdict(9, "parser round trips at quantization tolerance")
