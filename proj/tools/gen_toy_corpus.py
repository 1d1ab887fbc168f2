#!/usr/bin/env python3
# Copyright 2026 The kvsmooth Authors
# SPDX-License-Identifier: Apache-2.0
"""Writes the seeded toy corpus under data/toy/.

The corpus is tiny and synthetic: a 256-word vocab, an object lexicon, 20
annotated "images" whose prompts list their objects between image markers,
OPOPE probes for each image, and small hand fixtures for the metric tests.
"""

import argparse
import json
import pathlib
import random

OBJECTS = {
    "person": ["person", "man", "woman", "people", "child"],
    "dog": ["dog", "puppy"],
    "cat": ["cat", "kitten"],
    "bicycle": ["bicycle", "bike"],
    "car": ["car"],
    "bus": ["bus"],
    "table": ["table"],
    "chair": ["chair"],
    "cup": ["cup", "mug"],
    "bottle": ["bottle"],
    "pizza": ["pizza"],
    "hot dog": ["hot dog"],
    "umbrella": ["umbrella"],
    "bench": ["bench"],
    "clock": ["clock"],
    "horse": ["horse"],
    "boat": ["boat"],
    "kite": ["kite"],
    "laptop": ["laptop"],
    "phone": ["phone"],
    "book": ["book"],
    "vase": ["vase"],
    "bird": ["bird"],
    "train": ["train"],
}

# Objects that tend to appear together; adversarial negatives come from here.
COOCCUR = {
    "table": ["chair", "cup", "bottle", "pizza"],
    "dog": ["person", "bench", "cat"],
    "car": ["bus", "person", "bicycle"],
    "laptop": ["phone", "cup", "book"],
    "boat": ["bird", "person", "umbrella"],
}

FUNCTION_WORDS = (
    "a an the of on in at with and near next to under over beside behind is are two three "
    "some this that there it its his her their sits stands lies rides holds looks shows "
    "image picture photo describe scene view small large red blue green white black old "
    "new wooden street room park beach kitchen table-top outside inside sunny cloudy"
).split()

SPECIAL = ["<unk>", "<eos>", "<image>", "</image>", ".", ",", ":"]


def build_vocab(size):
    words = list(SPECIAL)
    for forms in OBJECTS.values():
        for form in forms:
            for w in form.split():
                if w not in words:
                    words.append(w)
    for w in FUNCTION_WORDS:
        if w not in words:
            words.append(w)
    i = 0
    while len(words) < size:
        words.append(f"w{i:03d}")
        i += 1
    return words


def write_json(path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(pathlib.Path(__file__).resolve().parent.parent / "data" / "toy"))
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = random.Random(args.seed)

    vocab = build_vocab(256)
    write_json(out / "vocab.json", {"tokens": vocab, "unk": "<unk>"})
    write_json(out / "lexicon.json", OBJECTS)

    names = sorted(OBJECTS)
    annotations, prompts, probes = {}, [], []
    for i in range(1, 21):
        image = f"img{i:02d}"
        anchor = rng.choice(sorted(COOCCUR))
        objs = {anchor} | set(rng.sample(names, rng.randint(1, 3)))
        annotations[image] = sorted(objs)
        # The prompt stands in for visual tokens: each object's first form.
        visual = " ".join(OBJECTS[o][0] for o in sorted(objs))
        prompts.append({"id": image, "image_id": image,
                        "text": f"<image> {visual} </image> describe the image :"})
        for o in sorted(objs):
            probes.append({"image_id": image, "object": o, "polarity": "positive", "strategy": "random"})
            probes.append({"image_id": image, "object": o, "polarity": "positive", "strategy": "popular"})
            probes.append({"image_id": image, "object": o, "polarity": "positive", "strategy": "adversarial"})
        absent = [n for n in names if n not in objs]
        probes.append({"image_id": image, "object": rng.choice(absent), "polarity": "negative", "strategy": "random"})
        popular = [n for n in ["person", "table", "car", "dog", "cup"] if n not in objs]
        probes.append({"image_id": image, "object": popular[0], "polarity": "negative", "strategy": "popular"})
        adversarial = [n for n in COOCCUR[anchor] if n not in objs] or absent
        probes.append({"image_id": image, "object": adversarial[0], "polarity": "negative",
                       "strategy": "adversarial"})
    write_json(out / "annotations.json", annotations)
    write_jsonl(out / "prompts.jsonl", prompts)
    write_jsonl(out / "probes.jsonl", probes)

    # Five-image hand fixture: captions of fx3 and fx5 each add one object
    # missing from their annotation.
    write_json(out / "fixture_annotations.json", {
        "fx1": ["bicycle", "person"],
        "fx2": ["dog", "table"],
        "fx3": ["bus"],
        "fx4": ["bench", "car", "person"],
        "fx5": ["hot dog", "table"],
    })
    write_jsonl(out / "fixture_captions.jsonl", [
        {"image_id": "fx1", "caption": "A man riding a bike."},
        {"image_id": "fx2", "caption": "A dog sleeps under the table."},
        {"image_id": "fx3", "caption": "A bus parked beside a car."},
        {"image_id": "fx4", "caption": "A woman next to her car."},
        {"image_id": "fx5", "caption": "Hot dogs on a table near a dog."},
    ])
    # Against the captions above: bicycle TP, bus TP, car on fx3 FP, unmentioned
    # bench on fx4 FN.
    write_jsonl(out / "fixture_probes.jsonl", [
        {"image_id": "fx1", "object": "bicycle", "polarity": "positive", "strategy": "random"},
        {"image_id": "fx3", "object": "bus", "polarity": "positive", "strategy": "random"},
        {"image_id": "fx3", "object": "car", "polarity": "negative", "strategy": "random"},
        {"image_id": "fx4", "object": "bench", "polarity": "positive", "strategy": "random"},
    ])

    run = {
        "schema_version": 1,
        "model": {"num_layers": 4, "num_heads": 4, "head_dim": 16, "hidden_dim": 64, "ffn_dim": 256,
                  "vocab_size": 256, "max_seq_len": 128, "norm_kind": "pre-norm-rms", "seed": 7},
        "prompts": "prompts.jsonl",
        "vocab": "vocab.json",
        "max_new_tokens": 64,
        "smoother": {"enabled": True, "mode": "adaptive", "target": "key_value", "lambda_ref": 0.9,
                     "clip_width": 0.2, "queue_capacity": 15, "layer_start": 1, "layer_end": 3},
        "decode": {"smooth_before_output": False, "intercept_prefill": False, "eos_id": None},
        "trace": {"steps": True, "tracked_ids": [], "retain_history": False},
        "eval": {"lexicon": "lexicon.json", "annotations": "annotations.json", "probes": "probes.jsonl",
                 "averaging": "micro", "beta": 0.2},
        "bench": {"repetitions": 5},
    }
    write_json(out / "run.json", run)


if __name__ == "__main__":
    main()
