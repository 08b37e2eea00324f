def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid or rep.when not in ("call", "setup"):
                continue
            if outcome == "passed" and rep.when != "call":
                continue
            name = nodeid.split("::")[-1]
            lines.append((name, {"passed": "PASS", "skipped": "SKIP"}.get(outcome, "FAIL")))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for name, status in sorted(set(lines)):
        terminalreporter.write_line(f"{status:4s}  {name}")
