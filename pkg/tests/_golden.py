"""Golden conversation recorder; run ``python tests/_golden.py`` to rewrite the
file, and only after an intended protocol change."""

import json
from pathlib import Path

from querywatch.gateway import create_line

from _cases import golden_gateway, golden_requests

GOLDEN = Path(__file__).parent / "golden" / "conversation.jsonl"


def record() -> list[dict]:
    gw = golden_gateway()
    req = create_line()
    resp = gw.handle_line(req)
    out = [{"request": req, "response": resp}]
    aid = int(json.loads(resp)["account-id"])
    out += [{"request": r, "response": gw.handle_line(r)} for r in golden_requests(aid)]
    return out


if __name__ == "__main__":
    GOLDEN.parent.mkdir(exist_ok=True)
    GOLDEN.write_text("".join(json.dumps(rec, sort_keys=True) + "\n" for rec in record()))
