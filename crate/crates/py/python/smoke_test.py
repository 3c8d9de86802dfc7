"""Smoke test for the `mmrl` extension module.

Build first with `cargo build --release -p mmrl-py`; the script loads
`target/release/libmmrl.so` (or `mmrl` from the import path if installed).
"""

import importlib.machinery
import importlib.util
import os
import pathlib
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parents[3]


def load():
    try:
        import mmrl  # noqa: F401

        return sys.modules["mmrl"]
    except ImportError:
        pass
    lib_dir = pathlib.Path(os.environ.get("MMRL_LIB_DIR", ROOT / "target" / "release"))
    for name in ("libmmrl.so", "libmmrl.dylib", "mmrl.dll"):
        path = lib_dir / name
        if path.exists():
            loader = importlib.machinery.ExtensionFileLoader("mmrl", str(path))
            spec = importlib.util.spec_from_file_location("mmrl", path, loader=loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit(f"extension not found in {lib_dir}; run `cargo build --release -p mmrl-py`")


def main():
    mmrl = load()

    assert abs(mmrl.harmonic_mean(85.53, 78.32) - 81.77) <= 0.01

    vit_b16 = mmrl.Config(
        "variant = MMRL\nL = 12\nheads = 8\nd_v = 768\nd_t = 512\nd = 512\nd_r = 512\n"
        "K = 5\nJ = 6\nM = 196\npatch_dim = 768\nN = 77\nvocab = 49408\n"
    )
    total, groups = mmrl.count_trainable_parameters(vit_b16)
    assert total == 4_992_256, total
    assert sum(n for _, n in groups) == total

    try:
        mmrl.Config("momentum = 0.9")
    except KeyError as e:
        assert "momentum" in str(e)
    else:
        raise AssertionError("unknown key accepted")

    quick = mmrl.Config(
        "L = 2\nd_v = 16\nd_t = 16\nd = 16\nd_r = 8\nM = 4\npatch_dim = 4\nN = 10\n"
        "classes = 4\nshots = 2\ntest_shots = 2\nsteps = 3\nbatch = 4\nseeds = 1,2\n"
    )
    model = mmrl.Model(quick, seed=1)
    before = model.frozen_hash()
    assert model.num_trainable() > 0
    assert all(not n.startswith("backbone") for n in model.trainable_names())

    with tempfile.TemporaryDirectory() as tmp:
        report = mmrl.run_experiment(quick, tmp)
        assert [row[0] for row in report["per_seed"]] == [1, 2]
        assert (pathlib.Path(tmp) / "metrics.tsv").exists()

        path = os.path.join(tmp, "model.ckpt")
        model.save(path)
        again = mmrl.Model.load(path)
        assert again.frozen_hash() == before
        scores = again.evaluate(quick)
        assert 0.0 <= scores["base"] <= 100.0

    print("mmrl smoke test ok:", report["base"], report["novel"])


if __name__ == "__main__":
    main()
