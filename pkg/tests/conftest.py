def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")
    config._criteria = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    res = item.config._criteria.setdefault(number, {"title": title, "ok": True, "ran": False, "detail": []})
    if call.when == "call":
        res["ran"] = True
    if call.excinfo is not None and not call.excinfo.errisinstance(KeyboardInterrupt):
        res["ok"] = False
    for key, value in item.user_properties:
        if call.when == "call" and key == "detail":
            res["detail"].append(value)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    crit = getattr(config, "_criteria", {})
    if not crit:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(crit):
        r = crit[number]
        verdict = "PASS" if r["ok"] and r["ran"] else "FAIL"
        line = f"criterion {number:2d} {verdict}  {r['title']}"
        if r["detail"]:
            line += "  |  " + "; ".join(r["detail"])
        terminalreporter.write_line(line)
