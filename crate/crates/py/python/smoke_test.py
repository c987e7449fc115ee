"""Quick end-to-end check of the compiled extension."""
import json
import math
import os
import tempfile

import aquacast


def main():
    assert aquacast.dtw([0.0, 1.0, 2.0], [0.0, 0.0, 1.0, 2.0]) == 0.0

    m = aquacast.point_metrics([1.0, 2.0, 3.0], [1.0, 2.0, 4.0])
    assert math.isclose(m["mse"], 1.0 / 3.0)
    assert aquacast.point_metrics([1.0, 1.0], [1.0, 2.0])["r2"] is None

    h, c = aquacast.complexity(list(range(100)), 3)
    assert h == 0.0 and c == 0.0

    auc = aquacast.dtw_accuracy_auc([[0.0, 1.0], [0.0, 3.0]], [[0.0, 1.0], [0.0, 1.0]])
    assert 0.0 < auc <= 1.0

    d = aquacast.synth("SynthMid", seed=1, n_nodes=3, steps=1200)
    assert len(d["flows"]) == 3 and len(d["rain"]) == 1200
    assert all(v >= 0.0 for row in d["flows"] for v in row)

    cfg = {"n_hist_vars": 2, "n_forecast_vars": 1, "hist_len": 16, "forecast_len": 8, "horizon": 8,
           "d_model": 8, "n_heads": 2, "n_layers": 1, "d_ff": 16, "kernel1": 4, "patch_stride": 4}
    model = aquacast.Model(json.dumps(cfg))
    y = model.predict([[0.1] * 16, [0.2] * 16], [[0.0] * 8])
    assert len(y) == 1 and len(y[0]) == 8
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.json")
        model.save(path)
        again = aquacast.Model.load(path)
        assert again.predict([[0.1] * 16, [0.2] * 16], [[0.0] * 8]) == y
    try:
        model.predict([[0.1] * 15, [0.2] * 15])
    except ValueError:
        pass
    else:
        raise AssertionError("shape mismatch accepted")
    print("smoke test passed:", aquacast.__version__, f"{model.parameter_count} parameters")


if __name__ == "__main__":
    main()
