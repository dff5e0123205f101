"""Prints the acceptance summary: one line per check and one roll-up line per criterion."""
from collections import OrderedDict


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", ()))
            if "criterion" in props and rep.when == "call":
                lines.append((props["criterion"], props.get("check", ""), outcome == "passed", rep.nodeid))
    if not lines:
        return
    lines.sort(key=lambda t: (int(t[0]), t[1]))
    tr = terminalreporter
    tr.section("acceptance criteria")
    per = OrderedDict()
    for crit, check, ok, _ in lines:
        tr.write_line(f"criterion {crit} [{check}]: {'PASS' if ok else 'FAIL'}")
        per.setdefault(crit, []).append(ok)
    for crit, oks in per.items():
        verdict = "PASS" if all(oks) else "FAIL"
        tr.write_line(f"CRITERION {crit}: {verdict} ({sum(oks)}/{len(oks)} checks)")
