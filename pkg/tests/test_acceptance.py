"""Acceptance gate: one checklist line per shipped guarantee.

Every test prints a single [PASS]/[FAIL] line (visible under `pytest -s`)
and asserts the same condition, covering exact parameter counts, gradient
correctness, transfer isolation, end-to-end learning on a seeded synthetic
corpus, the metrics implementations, preprocessing totality, the serving
document contract, and the chunked-training step laws.
"""

import copy
import http.client
import json
import math
import os
import re
import tempfile
import threading
import time
from importlib import resources

import numpy as np
import pytest

from evmguard import corpus, metrics, mol_net, service, tokenizer, trainer
from evmguard.corpus import Chunk, ClassCatalog, ContractRecord, SynthSpec
from evmguard.evm_bytecode import preprocess
from evmguard.mol_net import BranchConfig, StemConfig, backward, bce_loss, forward


def verdict(label: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
    assert ok, f"{label}: {detail}"


# --- shared end-to-end pipeline: seeded synthetic corpus, one training run ---


@pytest.fixture(scope="module")
def pipeline():
    spec = corpus.default_synth_spec(3)
    records = corpus.synth_generate(spec, corpus.all_label_combos(3, 120), seed=7)
    train_recs, _, test_recs = corpus.split(records, 7)
    vocab = tokenizer.fit([list(r.tokens) for r in train_recs])
    chunks = corpus.chunk(train_recs, corpus.DEFAULT_CHUNK_SIZE, seed=7)
    stem = StemConfig(
        vocab_size=len(vocab),
        embedding_dim=16,
        gru_hidden=64,
        dropout_rate=0.2,
        max_sequence_length=spec.max_length,
    )
    model = mol_net.init_model(
        stem, [BranchConfig(n) for n in spec.catalog.names], seed=7
    )
    config = trainer.TrainConfig(
        global_epochs=60, batch_size=32, learning_rate=0.001, seed=7
    )
    started = time.perf_counter()
    trainer.train(model, chunks, vocab, config)
    train_seconds = time.perf_counter() - started
    test_set = trainer.encode_records(test_recs, vocab, stem.max_sequence_length)
    return {
        "spec": spec,
        "vocab": vocab,
        "stem": stem,
        "model": model,
        "train_records": train_recs,
        "test_records": test_recs,
        "test_set": test_set,
        "train_seconds": train_seconds,
    }


@pytest.fixture(scope="module")
def transferred(pipeline):
    model = copy.deepcopy(pipeline["model"])
    probe = pipeline["test_set"].ids[:64]
    pre = forward(model, probe)
    new_names = list(corpus.DEFAULT_CLASS_NAMES[3:5])
    spec = SynthSpec(
        catalog=ClassCatalog(new_names),
        motifs=(("f4", "3b", "f4", "3b"), ("fa", "47", "fa", "47")),
        filler=corpus._SYNTH_FILLER,
        min_length=24,
        max_length=48,
    )
    records = corpus.synth_generate(spec, corpus.all_label_combos(2, 120), seed=8)
    new_chunks = corpus.chunk(records, corpus.DEFAULT_CHUNK_SIZE, seed=8)
    config = trainer.TrainConfig(
        global_epochs=10, batch_size=32, learning_rate=0.001, seed=7
    )
    started = time.perf_counter()
    trainer.transfer_train(
        model, new_chunks, [BranchConfig(n) for n in new_names], pipeline["vocab"], config
    )
    seconds = time.perf_counter() - started
    return {
        "model": model,
        "probe": probe,
        "pre": pre,
        "post": forward(model, probe),
        "new_chunks": new_chunks,
        "config": config,
        "seconds": seconds,
    }


def test_branch_parameter_counts():
    started = time.perf_counter()
    one = mol_net.branch_param_count(BranchConfig("a"))
    two = one + mol_net.branch_param_count(BranchConfig("b"))
    elapsed = time.perf_counter() - started
    ok = one == 16_641 and two == 33_282 and elapsed < 1.0
    verdict(
        "branch parameters",
        ok,
        f"default branch {one} (want 16641), two branches {two} (want 33282)",
    )


def test_stem_sizing():
    stem = mol_net.stem_param_count(mol_net.REFERENCE_STEM)
    model = mol_net.init_model(
        mol_net.REFERENCE_STEM, [BranchConfig(f"class_{i}") for i in range(6)], seed=0
    )
    total = mol_net.param_count(model)
    ok = stem == 115_846 - 6 * 16_641 == 16_000 and total == 115_846
    verdict(
        "stem sizing",
        ok,
        f"reference stem {stem} (want 115846 - 6*16641 = 16000), "
        f"six-branch model {total} (want 115846)",
    )


def _relu_pattern(model, cache):
    """Sign pattern of every hidden dense pre-activation (head excluded)."""
    return [
        pre > 0
        for k in range(len(model.branches))
        for pre in cache.branch_pre[k][:-1]
    ]


def test_gradient_finite_differences():
    # central differences are invalid within fd_step of a ReLU kink, so
    # perturbations that flip any activation pattern are skipped and counted
    fd_step, tol = 1e-3, 1e-4
    rng = np.random.default_rng(123)
    worst = 0.0
    checked = skipped = 0
    covered: set[str] = set()
    started = time.perf_counter()
    for trial in range(20):
        vocab_size = int(rng.integers(5, 10))
        stem = StemConfig(
            vocab_size=vocab_size,
            embedding_dim=int(rng.integers(2, 6)),
            gru_hidden=int(rng.integers(3, 7)),
            dropout_rate=0.2,
            max_sequence_length=16,
        )
        branches = [
            BranchConfig(f"b{i}", (int(rng.integers(2, 5)), 1))
            for i in range(int(rng.integers(1, 3)))
        ]
        model = mol_net.init_model(stem, branches, seed=trial, dtype=np.float64)
        batch = int(rng.integers(2, 4))
        steps = int(rng.integers(4, 9))
        ids = rng.integers(0, vocab_size, size=(batch, steps)).astype(np.int32)
        if trial % 3 == 0:
            ids[:, -2:] = 0  # force padded tails through the mask
        labels = rng.integers(0, 2, size=(batch, len(branches))).astype(np.float64)
        mode = "train" if trial % 2 else "eval"

        _, cache = forward(model, ids, mode=mode, seed=trial, keep_cache=True)
        grads = backward(model, cache, labels)
        base_pattern = _relu_pattern(model, cache)
        for name, grad in grads.items():
            flat = model.params[name].reshape(-1)
            gflat = grad.reshape(-1)
            picks = rng.choice(flat.size, size=min(3, flat.size), replace=False)
            for i in picks:
                keep = flat[i]
                flat[i] = keep + fd_step
                up, up_cache = forward(
                    model, ids, mode=mode, seed=trial, keep_cache=True
                )
                flat[i] = keep - fd_step
                down, down_cache = forward(
                    model, ids, mode=mode, seed=trial, keep_cache=True
                )
                flat[i] = keep
                stable = all(
                    np.array_equal(b, u) and np.array_equal(b, d)
                    for b, u, d in zip(
                        base_pattern,
                        _relu_pattern(model, up_cache),
                        _relu_pattern(model, down_cache),
                    )
                )
                if not stable:
                    skipped += 1
                    continue
                fd = (bce_loss(labels, up) - bce_loss(labels, down)) / (2.0 * fd_step)
                denom = max(abs(fd), abs(gflat[i]), 1e-8)
                worst = max(worst, abs(fd - gflat[i]) / denom)
                checked += 1
            covered.add(name.rsplit(":", 1)[-1] if name.startswith("branch:") else name)
    elapsed = time.perf_counter() - started
    wanted = {"embedding"}
    wanted |= {f"gru/{k}{g}" for k in "wub" for g in "zrc"}
    wanted |= {"w0", "b0", "w1", "b1"}  # dense layers and the sigmoid head
    ok = (
        worst < tol and wanted <= covered and elapsed < 60.0
        and checked > 20 * skipped
    )
    verdict(
        "gradient finite differences",
        ok,
        f"20 random models, {checked} entries checked ({skipped} near a ReLU "
        f"kink skipped), worst relative error {worst:.2e} (tol {tol:.0e}), "
        f"{elapsed:.1f}s",
    )


def test_transfer_preservation(transferred):
    pre, post = transferred["pre"], transferred["post"]
    identical = bool(np.array_equal(post[:, : pre.shape[1]], pre))
    ok = identical and post.shape == (64, 5)
    verdict(
        "transfer preservation",
        ok,
        "existing-branch outputs on the 64-sample probe are bit-identical "
        f"after adding and training 2 branches (shape {post.shape})",
    )


def test_transfer_efficiency(pipeline, transferred):
    trainable = mol_net.param_count(transferred["model"], "trainable")
    per_branch = mol_net.branch_param_count(BranchConfig("x"))
    scratch = mol_net.init_model(
        pipeline["stem"],
        [BranchConfig(n) for n in corpus.DEFAULT_CLASS_NAMES[3:5]],
        seed=7,
    )
    started = time.perf_counter()
    trainer.train(
        scratch, transferred["new_chunks"], pipeline["vocab"], transferred["config"]
    )
    scratch_seconds = time.perf_counter() - started
    baseline = mol_net.param_count(scratch)
    ok = trainable == 2 * per_branch == 33_282 and trainable < baseline
    saved = 100.0 * (1.0 - transferred["seconds"] / scratch_seconds)
    verdict(
        "transfer efficiency",
        ok,
        f"transfer trains {trainable} parameters (want 33282) vs {baseline} "
        f"from scratch; wall clock {transferred['seconds']:.2f}s vs "
        f"{scratch_seconds:.2f}s ({saved:.0f}% less, reported not asserted)",
    )


def test_synthetic_end_to_end(pipeline):
    report = trainer.evaluate(pipeline["model"], pipeline["test_set"])
    f1s = {m.name: m.f1 for m in report.per_class}
    longest = max(len(r.tokens) for r in pipeline["train_records"])
    sizes_ok = (
        len(pipeline["train_records"]) >= 600
        and len(pipeline["test_records"]) >= 150
        and longest <= 256
    )
    ok = sizes_ok and all(v >= 0.95 for v in f1s.values()) and (
        pipeline["train_seconds"] < 300.0
    )
    shown = ", ".join(f"{k}={v:.3f}" for k, v in f1s.items())
    verdict(
        "synthetic end-to-end",
        ok,
        f"{len(pipeline['train_records'])} train / {len(pipeline['test_records'])} "
        f"test, per-class F1 {shown} (want >= 0.95 each), "
        f"trained in {pipeline['train_seconds']:.1f}s (limit 300s)",
    )


def test_metrics_oracle():
    rng = np.random.default_rng(99)
    worst = 0.0
    started = time.perf_counter()
    for _ in range(1000):
        n = int(rng.integers(1, 11))
        k = int(rng.integers(1, 6))
        y_true = rng.integers(0, 2, size=(n, k)).astype(bool)
        y_pred = rng.integers(0, 2, size=(n, k)).astype(bool)
        probs = rng.random((n, k))
        rep = metrics.evaluate([f"c{j}" for j in range(k)], y_true, y_pred, probs)

        f1_terms, supports = [], []
        for j in range(k):
            tp = fp = fn = tn = 0
            for i in range(n):
                t, p = bool(y_true[i, j]), bool(y_pred[i, j])
                tp += t and p
                fp += (not t) and p
                fn += t and (not p)
                tn += (not t) and (not p)
            prec = tp / (tp + fp) if tp + fp else 0.0
            rec = tp / (tp + fn) if tp + fn else 0.0
            f1 = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 0.0
            fpr = fp / (fp + tn) if fp + tn else 0.0
            fnr = fn / (fn + tp) if fn + tp else 0.0
            m = rep.per_class[j]
            for got, want in (
                (m.precision, prec), (m.recall, rec), (m.f1, f1),
                (m.fpr, fpr), (m.fnr, fnr), (m.counts.support, tp + fn),
            ):
                worst = max(worst, abs(got - want))
            f1_terms.append(f1 * (tp + fn))
            supports.append(tp + fn)

        total = sum(supports)
        weighted = math.fsum(f1_terms) / total if total else 0.0
        inter = sum(
            bool(y_true[i, j]) and bool(y_pred[i, j])
            for i in range(n) for j in range(k)
        )
        union = sum(
            bool(y_true[i, j]) or bool(y_pred[i, j])
            for i in range(n) for j in range(k)
        )
        jac = inter / union if union else 0.0
        mismatches = sum(
            bool(y_true[i, j]) != bool(y_pred[i, j])
            for i in range(n) for j in range(k)
        )
        ham = mismatches / (n * k)
        cells = []
        for i in range(n):
            for j in range(k):
                pc = min(max(float(probs[i, j]), 1e-7), 1.0 - 1e-7)
                cells.append(-math.log(pc) if y_true[i, j] else -math.log(1.0 - pc))
        bce = math.fsum(cells) / (n * k)
        for got, want in (
            (rep.weighted_f1, weighted), (rep.jaccard, jac),
            (rep.hamming, ham), (rep.mean_bce, bce),
        ):
            worst = max(worst, abs(got - want))
    elapsed = time.perf_counter() - started
    ok = worst <= 1e-12 and elapsed < 10.0
    verdict(
        "metrics oracle",
        ok,
        f"1000 random instances vs brute-force enumeration, worst absolute "
        f"difference {worst:.2e} (tol 1e-12), {elapsed:.1f}s",
    )


def test_preprocessing_totality():
    # independent read of the shipped instruction table
    assigned = {}
    text = resources.files("evmguard.data").joinpath("opcodes.txt").read_text()
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        byte_text, _, operands = line.split()
        assigned[int(byte_text, 16)] = int(operands)

    def expected_token(b: int) -> str:
        if b not in assigned:
            return "xx"
        if 0x60 <= b <= 0x7F:
            return "60"
        if 0x80 <= b <= 0x8F:
            return "80"
        if 0x90 <= b <= 0x9F:
            return "90"
        if 0xA0 <= b <= 0xA4:
            return "a0"
        return f"{b:02x}"

    bad = [
        b for b in range(256) if preprocess(f"{b:02x}") != [expected_token(b)]
    ]

    rng = np.random.default_rng(17)
    elision_ok = True
    for k in range(1, 33):
        operands = bytes(rng.integers(0, 256, size=k, dtype=np.uint8)).hex()
        program = f"00{0x5F + k:02x}{operands}00"
        elision_ok = elision_ok and preprocess(program) == ["00", "60", "00"]
    ok = not bad and elision_ok
    verdict(
        "preprocessing totality",
        ok,
        f"all 256 byte values normalized per the shipped table "
        f"({len(bad)} mismatches), operand elision holds for PUSH1..PUSH32",
    )


class _StubTimer:
    """0.0, 0.02, 0.0, 0.02, ... so every elapsed reading is 0.02 s."""

    def __init__(self):
        self.calls = 0

    def __call__(self):
        value = 0.0 if self.calls % 2 == 0 else 0.02
        self.calls += 1
        return value


def test_serving_contract():
    vocab = tokenizer.fit([["60", "52", "f1"]])
    stem = StemConfig(
        vocab_size=len(vocab), embedding_dim=3, gru_hidden=4,
        dropout_rate=0.2, max_sequence_length=16,
    )
    model = mol_net.init_model(
        stem, [BranchConfig("alpha", (3, 1)), BranchConfig("beta", (3, 1))], seed=0
    )
    model.vocab_fingerprint = vocab.fingerprint()
    svc = service.PredictionService(model, vocab, timer=_StubTimer())

    golden = svc.predict_document("0x")
    golden_ok = golden == (
        '{"prediction": {"alpha": 0.5000, "beta": 0.5000},'
        ' "prediction_time in_second": "0.02"}'
    )

    server = service.make_server(svc, "127.0.0.1", 0)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        conn = http.client.HTTPConnection(*server.server_address, timeout=5)
        conn.request("POST", "/predict", json.dumps({"smart_contract": "6060604052"}))
        resp = conn.getresponse()
        body = resp.read().decode("utf-8")
        status = resp.status
        conn.close()
    finally:
        server.shutdown()
        server.server_close()
        thread.join(timeout=5)

    parsed = json.loads(body)
    shape_ok = (
        status == 200
        and body.startswith('{"prediction": {')
        and '}, "prediction_time in_second": "' in body
        and set(parsed) == {"prediction", "prediction_time in_second"}
        and list(parsed["prediction"]) == ["alpha", "beta"]
        and re.fullmatch(r"\d+\.\d{2}", parsed["prediction_time in_second"])
        and len(re.findall(r'": \d\.\d{4}[,}]', body)) == 2
    )
    ok = golden_ok and bool(shape_ok)
    verdict(
        "serving contract",
        ok,
        "predict round-trip is byte-exact on keys "
        "(literal 'prediction_time in_second', 4-decimal probabilities)",
    )


def test_chunk_and_step_laws():
    rng = np.random.default_rng(5)
    chunk_ok = True
    for trial in range(25):
        n = int(rng.integers(1, 400))
        size = int(rng.integers(1, 64))
        records = [
            ContractRecord(f"a{i:03d}", ("60", "01"), (bool(i % 2),))
            for i in range(n)
        ]
        chunks = corpus.chunk(records, size, seed=trial)
        sizes = [len(c.records) for c in chunks]
        chunk_ok = chunk_ok and len(chunks) == -(-n // size)
        chunk_ok = chunk_ok and all(s == size for s in sizes[:-1])
        chunk_ok = chunk_ok and sum(sizes) == n
        seen = sorted(r.address for c in chunks for r in c.records)
        chunk_ok = chunk_ok and seen == sorted(r.address for r in records)

    roundtrip_ok = True
    pool = ("60", "80", "xx", "01", "ff")
    for trial in range(10):
        k = int(rng.integers(1, 5))
        catalog = ClassCatalog(tuple(f"c{j}" for j in range(k)))
        records = tuple(
            ContractRecord(
                f"0x{i:04x}",
                tuple(pool[t] for t in rng.integers(0, len(pool), size=rng.integers(1, 9))),
                tuple(bool(b) for b in rng.integers(0, 2, size=k)),
            )
            for i in range(int(rng.integers(1, 20)))
        )
        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "chunk.csv")
            corpus.write_chunk(Chunk(index=0, records=records), path, catalog)
            back = corpus.read_chunk(path, catalog)
        roundtrip_ok = roundtrip_ok and back.records == records

    step_ok = True
    for trial in range(5):
        sizes = [int(s) for s in rng.integers(5, 41, size=rng.integers(1, 4))]
        batch = int(rng.integers(4, 17))
        g, l = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        records = [
            ContractRecord(f"s{i}", ("60", "01", "ff"), (bool(i % 2),))
            for i in range(sum(sizes))
        ]
        offset, chunks = 0, []
        for idx, s in enumerate(sizes):
            chunks.append(Chunk(index=idx, records=tuple(records[offset:offset + s])))
            offset += s
        vocab = tokenizer.fit([["60", "01", "ff"]])
        stem = StemConfig(
            vocab_size=len(vocab), embedding_dim=2, gru_hidden=3,
            dropout_rate=0.2, max_sequence_length=4,
        )
        model = mol_net.init_model(stem, [BranchConfig("only", (2, 1))], seed=trial)
        config = trainer.TrainConfig(
            global_epochs=g, local_epochs=l, batch_size=batch, seed=trial
        )
        history = trainer.train(model, chunks, vocab, config)
        expected = g * sum(l * (-(-s // batch)) for s in sizes)
        step_ok = step_ok and history.optimizer_steps == expected

    ok = chunk_ok and roundtrip_ok and step_ok
    verdict(
        "chunk and step laws",
        ok,
        "ceil chunk sizing, permutation multiset equality, CSV round-trip "
        "identity, and the global x local x ceil(n/batch) step count all hold "
        "on randomized corpora",
    )
