"""Reference external evaluator speaking the QoE line protocol.

    python -m distgdm.evaluator_stub builtin        # builtin formula, default world
    python -m distgdm.evaluator_stub echo 0.42      # constant answer
    python -m distgdm.evaluator_stub silent         # never answers (timeout tests)
    python -m distgdm.evaluator_stub garbage        # malformed replies
"""
import json
import sys
import time

import numpy as np

from .agents import PROTOCOL_VERSION, Persona, QoEWeights, builtin_qoe
from .semantics import default_world


def answer(msg, mode, value, world, weights):
    if msg.get("version") != PROTOCOL_VERSION:
        return {"version": PROTOCOL_VERSION, "error": f"unsupported version {msg.get('version')!r}"}
    if mode == "echo":
        return {"version": PROTOCOL_VERSION, "qoe": value}
    persona = Persona(**msg["persona"])
    rep = builtin_qoe(world, persona, msg["own"]["id"], msg["anchor"]["id"],
                      np.array(msg["latent"]), weights)
    return {"version": PROTOCOL_VERSION, "qoe": rep.qoe}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    mode = argv[0] if argv else "builtin"
    value = float(argv[1]) if len(argv) > 1 else 0.5
    world, weights = default_world(), QoEWeights()
    for line in sys.stdin:
        if mode == "silent":
            time.sleep(3600)
        if mode == "garbage":
            print("not json", flush=True)
            continue
        try:
            reply = answer(json.loads(line), mode, value, world, weights)
        except Exception as exc:  # report instead of dying mid-protocol
            reply = {"version": PROTOCOL_VERSION, "error": str(exc)}
        print(json.dumps(reply), flush=True)


if __name__ == "__main__":
    main()
