import re


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, in criterion order."""
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if getattr(rep, "when", None) != "call":
                continue
            lines.extend(v for k, v in rep.user_properties if k == "criterion")
    if not lines:
        return
    lines.sort(key=lambda s: int(re.search(r"C(\d+)", s).group(1)))
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
