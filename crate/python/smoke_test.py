"""Smoke test for the pyfenec extension module.

Run after `pip install --no-build-isolation crates/python`.
"""

import math
import os
import random
import tempfile

import pyfenec


def blobs(n_classes, n_features, per_class, separation, rng):
    rows, labels = [], []
    for c in range(n_classes):
        mean = [separation if j == c % n_features else 0.0 for j in range(n_features)]
        for _ in range(per_class):
            rows.append([m + rng.gauss(0.0, 1.0) for m in mean])
            labels.append(c)
    return rows, labels


def check(cond, what):
    if not cond:
        raise SystemExit(f"FAIL {what}")
    print(f"ok   {what}")


def main():
    rng = random.Random(7)
    train_rows, train_labels = blobs(4, 6, 40, 8.0, rng)
    test_rows, test_labels = blobs(4, 6, 15, 8.0, rng)

    inv = pyfenec.invert_spd([[2.0, 0.0], [0.0, 4.0]])
    check(abs(inv[0][0] - 0.5) < 1e-12 and abs(inv[1][1] - 0.25) < 1e-12, "invert_spd")

    corr = pyfenec.shrunk_correlation(train_rows, 1.0, 0.5)
    check(all(abs(corr[i][i] - 1.0) < 1e-12 for i in range(6)), "shrunk_correlation has unit diagonal")

    normed = pyfenec.sample_normalize(train_rows[:5])
    check(all(abs(math.hypot(*r) - 1.0) < 1e-12 for r in normed), "sample_normalize")

    centroids, assign, history = pyfenec.kmeans(train_rows[:40], 3, seed=1)
    check(len(centroids) == 3 and len(assign) == 40, "kmeans shapes")
    check(all(b <= a * (1 + 1e-12) for a, b in zip(history, history[1:])), "kmeans objective non-increasing")

    hyper = {
        "method": "fenec",
        "n_clusters": 3,
        "n_neighbors_or_points": 2,
        "gamma1": 1.0,
        "gamma2": 1.0,
    }
    model = pyfenec.Model(hyper, seed=3)
    first = [i for i, y in enumerate(train_labels) if y < 2]
    second = [i for i, y in enumerate(train_labels) if y >= 2]
    model.fit_task([train_rows[i] for i in first], [train_labels[i] for i in first])
    model.fit_task([train_rows[i] for i in second], [train_labels[i] for i in second])
    check(model.class_ids == [0, 1, 2, 3], "model stores all classes")
    check(model.parameter_count == 4 * (6 * 6 + 3 * 6), "parameter_count")
    acc = model.score(test_rows, test_labels)
    check(acc >= 0.95, f"fenec accuracy {acc:.3f}")

    try:
        model.fit_task(train_rows[:5], train_labels[:5])
    except pyfenec.FenecError:
        check(True, "refitting a stored class raises FenecError")
    else:
        check(False, "refitting a stored class raises FenecError")

    log_hyper = dict(hyper, method="fenec_log", learning_rate=0.5)
    log_model = pyfenec.Model(log_hyper, seed=3)
    log_model.fit_task(train_rows, train_labels)
    hist = log_model.train_head(train_rows, train_labels, training={"max_epochs": 50})
    check(log_model.head["frozen"], f"head trained for {len(hist['train_loss'])} epochs and frozen")
    probs = log_model.predict_proba(test_rows[:10])
    check(all(abs(sum(p) - 1.0) < 1e-12 for p in probs), "predict_proba rows sum to one")

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.fncm")
        log_model.save(path)
        reloaded = pyfenec.Model.load(path)
        check(reloaded.predict(test_rows) == log_model.predict(test_rows), "model round-trips through disk")

        train_path = os.path.join(tmp, "train.fenc")
        test_path = os.path.join(tmp, "test.fenc")
        pyfenec.write_features(train_path, train_rows, train_labels)
        pyfenec.write_features(test_path, test_rows, test_labels)
        rows, labels = pyfenec.load_features(train_path)
        check(labels == train_labels and len(rows) == len(train_rows), "feature file round-trip")

        reports = [
            pyfenec.run_protocol(train_path, test_path, [[0, 1], [2, 3]], hyper, seed=s)
            for s in (0, 1)
        ]
        check(len(reports[0]["per_task_accuracy"]) == 2, "run_protocol reports per task")
        summary = pyfenec.aggregate_runs(reports)
        check(summary["n_runs"] == 2, "aggregate_runs")

        try:
            pyfenec.load_features(os.path.join(tmp, "missing.fenc"))
        except OSError:
            check(True, "missing file raises OSError")
        else:
            check(False, "missing file raises OSError")

    print("all smoke checks passed")


if __name__ == "__main__":
    main()
