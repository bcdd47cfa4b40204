import pytest

from svphw import cli
from svphw.gradcheck import END_TO_END_TOLERANCE, OP_TOLERANCE, CheckResult, end_to_end_check, op_checks, report_tsv


@pytest.fixture(scope="module")
def op_results():
    return dict(op_checks(seed=3))


@pytest.mark.parametrize(
    "prefix",
    ["conv2d", "unary", "depthwise", "dsconv", "se", "mnse", "convlstm", "warp", "latent_head", "reparameterize", "kl", "fuse", "elbo_loss"],
)
def test_op_family_passes(op_results, prefix):
    errs = {k: v for k, v in op_results.items() if k.startswith(prefix)}
    assert errs
    assert max(errs.values()) < OP_TOLERANCE, errs


def test_end_to_end_rollout_gradient():
    err, count = end_to_end_check(seed=1)
    assert count >= 200
    assert err < END_TO_END_TOLERANCE


def test_report_tsv_and_result():
    r = [CheckResult("a", 1e-6, 1e-4), CheckResult("b", 2e-4, 1e-4)]
    assert [x.passed for x in r] == [True, False]
    lines = report_tsv(r).splitlines()
    assert lines[0] == "check\tmax_rel_error\ttolerance\tpassed"
    assert lines[2].endswith("\tno")


def test_cli_gradcheck_exit_codes(tmp_path, monkeypatch):
    assert cli.main(["gradcheck", "--out", str(tmp_path / "ok")]) == 0
    assert "end_to_end/" in (tmp_path / "ok" / "gradcheck.tsv").read_text()
    monkeypatch.setattr(cli, "run_all", lambda seed: [CheckResult("bad", 1.0, 1e-4)])
    assert cli.main(["gradcheck", "--out", str(tmp_path / "bad")]) == 2
