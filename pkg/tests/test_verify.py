import numpy as np

from resvmamba import cli, ssm, verify


def test_quick_suites_pass(capsys):
    assert cli.main(["verify", "--quick"]) == 0
    out = capsys.readouterr().out
    assert "8/8 suites passed" in out and "FAIL" not in out


def dropped_carry_scan(a, b, chunk=None):
    """Chunked scan that forgets to carry state across chunk boundaries."""
    L = a.shape[1]
    chunk = L if chunk is None else chunk
    out = np.empty_like(b)
    for s in range(0, L, chunk):
        h = np.zeros_like(b[:, 0])
        for t in range(s, min(s + chunk, L)):
            h = a[:, t] * h + b[:, t]
            out[:, t] = h
    return out


def test_scan_oracle_catches_corrupted_chunk_logic(monkeypatch):
    assert verify.scan_oracle_suite(instances=3).passed
    monkeypatch.setattr(ssm, "linear_scan", dropped_carry_scan)
    res = verify.scan_oracle_suite(instances=3)
    assert not res.passed and res.max_error > 1e-2


def test_verify_command_exits_2_on_failure(monkeypatch, capsys):
    monkeypatch.setattr(ssm, "linear_scan", dropped_carry_scan)
    assert cli.main(["verify", "--quick"]) == 2
    assert "FAIL  scan_oracle" in capsys.readouterr().out


def test_gradient_suite_catches_wrong_backward(monkeypatch):
    real = ssm._b_bar_x_op

    def halved(Delta, B_sel, x):
        out = real(Delta, B_sel, x)
        if out._node is None:
            return out
        bw = out._node.backward_fn
        out._node.backward_fn = lambda g: tuple(None if v is None else 0.5 * v for v in bw(g))
        return out

    monkeypatch.setattr(ssm, "_b_bar_x_op", halved)
    res = verify.gradient_suite(include_model=False)
    assert not res.passed
