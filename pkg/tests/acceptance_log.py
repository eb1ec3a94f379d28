"""Collects one pass/fail line per acceptance criterion for the session summary."""
import time
from contextlib import contextmanager

RESULTS = []


@contextmanager
def criterion(number, title):
    rec = {"number": number, "title": title, "detail": "", "ok": False}
    start = time.perf_counter()
    try:
        yield rec
        rec["ok"] = True
    except BaseException as exc:
        rec["detail"] = rec["detail"] or f"{type(exc).__name__}: {exc}".splitlines()[0]
        raise
    finally:
        rec["seconds"] = time.perf_counter() - start
        RESULTS.append(rec)
        print(format_line(rec))


def format_line(rec):
    status = "PASS" if rec["ok"] else "FAIL"
    detail = f" ({rec['detail']})" if rec["detail"] else ""
    return f"criterion {rec['number']:>2} {status}  {rec['title']} [{rec['seconds']:.1f}s]{detail}"
