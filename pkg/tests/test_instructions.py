"""Instruction-corpus generation: prompts, tasks, composition."""

import numpy as np
import pytest

from sketchforge.datamodel import (
    Annotation,
    BoundingBox,
    ImageRecord,
    SketchRecord,
    SketchSource,
    TaskKind,
    parse_box_list,
    parse_count_answer,
)
from sketchforge.errors import SampleGenerationError, ValidationError
from sketchforge.instructions import (
    CompositionSpec,
    CorpusSources,
    PromptPool,
    build_finetune_corpus,
    gen_counting_sample,
    gen_detection_sample,
    gen_sbir_pairs,
    gen_vqa_sample,
    parse_prompt_pool,
)


def make_image(img_id, class_boxes):
    anns = []
    for cls, box in class_boxes:
        b = BoundingBox(*box)
        anns.append(Annotation(cls, b, area_px=b.area * 100 * 100))
    return ImageRecord(img_id, f"{img_id}.jpg", 100, 100, tuple(anns))


def make_pool(classes, per_class=4):
    return {
        c: [
            SketchRecord(f"sk-{c}-{i}", c, SketchSource.SKETCHY, f"{c}-{i}.png")
            for i in range(per_class)
        ]
        for c in classes
    }


BOXES3 = [
    (7, (0.1, 0.1, 0.3, 0.3)),
    (7, (0.4, 0.4, 0.6, 0.6)),
    (7, (0.7, 0.7, 0.9, 0.9)),
]


def test_prompt_pool_validation():
    PromptPool()  # defaults satisfy the invariants
    with pytest.raises(ValidationError):
        PromptPool(count=("<sketch> a", "<sketch> b"))
    with pytest.raises(ValidationError):
        PromptPool(sbir=("no placeholder", "<sketch> b", "<sketch> c"))


def test_parse_prompt_pool():
    text = """
# custom pool
[COUNT]
<sketch> q1
<sketch> q2
<sketch> q3
[BBOX]
<sketch> d1
<sketch> d2
<sketch> d3
[VQA]
<sketch> v1
<sketch> v2
<sketch> v3
[SBIR]
<sketch> s1
<sketch> s2
<sketch> s3
[PRETRAIN]
<sketch> p1
<sketch> p2
<sketch> p3
"""
    pool = parse_prompt_pool(text)
    assert pool.count == ("<sketch> q1", "<sketch> q2", "<sketch> q3")
    assert pool.detect[0] == "<sketch> d1"
    with pytest.raises(ValidationError):
        parse_prompt_pool("[WRONG]\nx\n")
    with pytest.raises(ValidationError):
        parse_prompt_pool("template before section\n")


def test_gen_counting_sample():
    img = make_image("im1", BOXES3)
    pool = make_pool([7])
    samp = gen_counting_sample("count-000001", img, 7, PromptPool(), pool, seed=1)
    assert samp.task is TaskKind.COUNT
    assert samp.rounds[0][0].startswith("COUNT")
    assert samp.rounds[0][1] == "3"
    assert parse_count_answer(samp.rounds[0][1]) == 3
    assert samp.sketch_id.startswith("sk-7-")
    assert samp.target_class == 7
    with pytest.raises(SampleGenerationError):
        gen_counting_sample("count-x", img, 9, PromptPool(), make_pool([9]), seed=1)


def test_sketch_selection_uniformity():
    img = make_image("im1", BOXES3)
    pool = make_pool([7], per_class=4)
    freq = {}
    n = 10000
    for i in range(n):
        samp = gen_counting_sample(f"count-{i:06d}", img, 7, PromptPool(), pool, seed=0)
        freq[samp.sketch_id] = freq.get(samp.sketch_id, 0) + 1
    assert len(freq) == 4
    for count in freq.values():
        assert 0.22 <= count / n <= 0.28


def test_gen_detection_sample():
    img = make_image(
        "im1", [(7, (0.1, 0.1, 0.3, 0.3)), (7, (0.4, 0.4, 0.6, 0.6)), (8, (0.7, 0.7, 0.9, 0.9))]
    )
    pool = make_pool([7, 8])
    samp = gen_detection_sample("bbox-000001", img, 7, PromptPool(), pool, seed=2)
    assert samp.rounds[0][0].startswith("BBOX")
    parsed = parse_box_list(samp.rounds[0][1])
    assert len(parsed.boxes) == 2 and parsed.dropped == 0
    want = img.boxes_of_class(7)
    for got, exp in zip(parsed.boxes, want):
        assert got.as_tuple() == pytest.approx(exp.as_tuple(), abs=0.005)


def test_gen_vqa_sample():
    img = make_image("im1", BOXES3)
    pool = make_pool([7])
    rounds = [("What is shown?", "A dog."), ("Where is it?", "On the left.")]
    no_sketch = gen_vqa_sample(
        "vqa-000001", img, rounds, False, None, PromptPool(), pool, seed=3
    )
    assert no_sketch.sketch_id is None
    assert no_sketch.target_class is None
    assert no_sketch.rounds[0][0] == "VQA What is shown?"
    assert len(no_sketch.rounds) == 2
    assert no_sketch.rounds[1] == ("Where is it?", "On the left.")

    with_sketch = gen_vqa_sample(
        "vqa-000002", img, rounds, True, 7, PromptPool(), pool, seed=3
    )
    assert with_sketch.sketch_id is not None
    assert with_sketch.target_class == 7
    assert with_sketch.rounds[0][0].startswith("VQA")
    assert "<sketch>" in with_sketch.rounds[0][0]
    assert with_sketch.rounds[0][0].endswith("What is shown?")

    with pytest.raises(SampleGenerationError):
        gen_vqa_sample("vqa-x", img, [], False, None, PromptPool(), pool, seed=3)


def single_class_images(counts):
    out = []
    i = 0
    for cls, n in counts.items():
        for _ in range(n):
            out.append(make_image(f"ret-{cls}-{i}", [(cls, (0.2, 0.2, 0.8, 0.8))]))
            i += 1
    return out


def test_gen_sbir_pairs_balance_and_classes():
    images = single_class_images({1: 10, 2: 10, 3: 10})
    pool = make_pool([1, 2])  # class 3 has no sketches: its images are skipped
    samples, skipped = gen_sbir_pairs(images, pool, 250, 0.5, seed=5)
    assert len(samples) == 250
    assert len(skipped) == 10
    by_image = {img.id: img.class_ids()[0] for img in images}
    yes = no = 0
    for s in samples:
        sketch_cls = int(s.sketch_id.split("-")[1])
        img_cls = by_image[s.image_id]
        assert s.rounds[0][0].startswith("SBIR")
        if s.rounds[0][1] == "yes":
            yes += 1
            assert sketch_cls == img_cls
        else:
            no += 1
            assert sketch_cls != img_cls
    assert yes == 125 and no == 125


def test_gen_sbir_pairs_odd_split():
    images = single_class_images({1: 5, 2: 5})
    pool = make_pool([1, 2])
    samples, _ = gen_sbir_pairs(images, pool, 25, 0.5, seed=7)
    answers = [s.rounds[0][1] for s in samples]
    assert abs(answers.count("yes") - answers.count("no")) <= 1


def test_gen_sbir_rejects_multi_class_images():
    img = make_image("multi", [(1, (0.1, 0.1, 0.3, 0.3)), (2, (0.4, 0.4, 0.6, 0.6))])
    with pytest.raises(SampleGenerationError):
        gen_sbir_pairs([img], make_pool([1, 2]), 4, 0.5, seed=1)


def build_sources(n_images=60, n_classes=3, qa_for=55, sbir_counts=None):
    rng = np.random.default_rng(61)
    images = []
    for i in range(n_images):
        classes = list(rng.choice(n_classes, size=2, replace=False))
        boxes = [
            (int(c), (0.1 + 0.05 * j, 0.1, 0.3 + 0.05 * j, 0.3))
            for j, c in enumerate(classes)
        ]
        images.append(make_image(f"im{i:03d}", boxes))
    pool = make_pool(range(n_classes))
    qa = {
        f"im{i:03d}": [(f"Question {i}?", f"Answer {i}.")] for i in range(qa_for)
    }
    sbir = single_class_images(sbir_counts or {0: 15, 1: 15})
    return CorpusSources(
        images=images, sketch_pool=pool, qa_rounds=qa, sbir_images=sbir
    )


def test_build_finetune_corpus_composition():
    spec = CompositionSpec(detect_n=110, vqa_n=50, count_n=30, sbir_n=25)
    sources = build_sources()
    samples, report = build_finetune_corpus(spec, sources, seed=17)
    assert report.realized == {"BBOX": 110, "COUNT": 30, "VQA": 50, "SBIR": 25}
    assert not report.has_shortfall
    assert len(samples) == 215
    assert {report.sbir_yes, report.sbir_no} == {12, 13}
    # detection samples cover unique (image, class) pairs
    det = [(s.image_id, s.target_class) for s in samples if s.task is TaskKind.DETECT]
    assert len(det) == len(set(det))
    # every prompt opens with its descriptor
    for s in samples:
        assert s.rounds[0][0].startswith(s.task.descriptor)


def test_build_finetune_corpus_determinism():
    spec = CompositionSpec(detect_n=40, vqa_n=20, count_n=10, sbir_n=8)
    a, _ = build_finetune_corpus(spec, build_sources(), seed=23)
    b, _ = build_finetune_corpus(spec, build_sources(), seed=23)
    assert [s.sample_id for s in a] == [s.sample_id for s in b]
    assert a == b
    c, _ = build_finetune_corpus(spec, build_sources(), seed=24)
    assert [s.sample_id for s in a] != [s.sample_id for s in c]


def test_build_finetune_corpus_shortfall():
    # only 10 qa conversations for a 50-sample vqa request
    spec = CompositionSpec(detect_n=20, vqa_n=50, count_n=5, sbir_n=4)
    sources = build_sources(qa_for=10)
    samples, report = build_finetune_corpus(spec, sources, seed=29)
    assert report.realized["VQA"] == 10
    assert report.shortfalls["VQA"] == 40
    assert report.has_shortfall


def test_vqa_sketch_fraction():
    spec = CompositionSpec(detect_n=0, vqa_n=40, count_n=0, sbir_n=0)
    sources = build_sources(qa_for=60)
    samples, report = build_finetune_corpus(spec, sources, seed=31)
    with_sketch = sum(1 for s in samples if s.sketch_id is not None)
    assert abs(with_sketch - 20) <= 1


def test_composition_spec_validation():
    with pytest.raises(ValidationError):
        CompositionSpec(detect_n=-1)
    with pytest.raises(ValidationError):
        CompositionSpec(vqa_sketch_fraction=1.5)
    spec = CompositionSpec()
    assert (spec.detect_n, spec.vqa_n, spec.count_n, spec.sbir_n) == (
        110000,
        50000,
        30000,
        25000,
    )
