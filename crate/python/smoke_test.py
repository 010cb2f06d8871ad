"""Smoke test for the forestlens extension.

Build first:
    cargo build --release -p forestlens-py
    cp target/release/libforestlens_py.so python/forestlens.so
"""
import json
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import forestlens as fl


def main():
    assert abs(fl.gini(3, 1) - 0.375) < 1e-12
    assert fl.r2_to_auc(0.0) == 0.5
    assert fl.roc_auc([0.1, 0.4, 0.35, 0.8], [False, False, True, True]) == 0.75

    x = [[float(i)] for i in range(8)]
    labels = [i >= 4 for i in range(8)]
    tree = fl.fit_tree(x, labels, [float(i) for i in range(8)], min_leaf=1)
    assert tree.depth == 1 and tree.root_feature == fl.FEATURE_NAMES[0]
    assert tree.predict_proba([[0.0], [7.0]]) == [0.0, 1.0]
    xs = [[float(i)] for i in range(40)]
    members = fl.fit_forest(xs, [i >= 20 for i in range(40)], [0.0] * 40, n_trees=4, max_depth=1)
    assert len(members) == 4

    cohort = fl.generate_cohort(seed=3)
    assert (cohort.n_students, len(cohort), cohort.n_tutors) == (1080, 4124, 46)
    changes = cohort.score_changes()
    assert (changes.n_students, len(changes)) == (968, 4012)

    report = fl.run_sweep(cohort, thresholds=[19.0, 20.0], n_seeds=3, n_trees=5, baselines=False)
    final = report.tree()
    print(final.to_dot())
    print("mean test AUC %.3f, whole-dataset AUC %.3f" % (report.mean_test_auc, report.whole_dataset_auc))
    print("recovery", fl.structure_recovery_score(final))
    assert 0.5 < report.mean_test_auc <= 1.0
    assert json.loads(report.to_json())["n_eps"] == 4124
    assert fl.Tree.from_json(final.to_json()).to_dot() == final.to_dot()
    assert fl.structure_recovery_score(fl.planted_tree()) == 1.0
    print("ok")


if __name__ == "__main__":
    main()
