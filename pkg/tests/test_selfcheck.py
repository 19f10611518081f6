from relufields.selfcheck import CHECKS, format_report, run_selfcheck


def test_all_checks_pass():
    results = run_selfcheck()
    assert len(results) == len(CHECKS) >= 12
    failed = [r for r in results if not r.passed]
    assert not failed, format_report(results)


def test_perturbed_sh_is_caught():
    results = {r.name: r for r in run_selfcheck(perturb_sh=True)}
    assert not results["SH orthonormality"].passed
    others = [r for name, r in results.items() if name != "SH orthonormality"]
    assert all(r.passed for r in others)


def test_report_format():
    text = format_report(run_selfcheck())
    lines = text.splitlines()
    assert lines[-1] == f"{len(CHECKS)}/{len(CHECKS)} checks passed"
    assert all(" PASS " in line for line in lines[1:-1])
