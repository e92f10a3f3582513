#!/usr/bin/env python3
"""The full 11-robot study: nominal, understating, and overstating attacks.

Eleven robots (two of them malicious) are pulled toward four distant
waypoints while exchanging connectivity levels every 5 ms and consensus
states every 100 ms.  Normal robots must keep at least F' = 7 neighbors
for W-MSR consensus to survive the two random-broadcast attackers.

Malicious robots bias their connectivity broadcasts by a constant:
understating (-2.5) makes the swarm huddle to keep the seemingly-starved
attackers connected; overstating (+3.5) relaxes the constraints so much
that an attacker itself can drop below 7 neighbors, while normal robots
never do.  CSV artifacts land in demos/out/.
"""

from pathlib import Path

import numpy as np

from resilient_swarm import run_scenario, scenario_config

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)
SEED = 1

print(f"running the three scenarios at seed {SEED} (about 10 s)...\n")
results = {}
for scenario in ("nominal", "understate", "overstate"):
    cfg = scenario_config(scenario, seed=SEED)
    log, verdict = run_scenario(cfg)
    results[scenario] = (cfg, log, verdict)
    log.write_h_traces(OUT / f"h_{scenario}.csv")
    log.write_consensus_traces(OUT / f"consensus_{scenario}.csv")
    log.write_summary_json(OUT / f"verdict_{scenario}.json", verdict)

header = f"{'scenario':<12} {'bias':>5} {'min normal h':>13} {'min malicious h':>16} " \
         f"{'min dist':>9} {'mean dist (8-10s)':>18} {'consensus':>10}"
print(header)
print("-" * len(header))
for scenario, (cfg, log, verdict) in results.items():
    status = "ok" if verdict.converged and verdict.safety_held else "FAILED"
    print(
        f"{scenario:<12} {cfg.attack.connectivity_bias:>+5.1f} {log.min_normal_h():>13.3f} "
        f"{log.min_malicious_h():>16.3f} {log.min_distance():>9.3f} "
        f"{log.mean_pairwise_distance(8.0, 10.0):>18.3f} {status:>10}"
    )

print("\nreading the table:")
print(" * every normal robot kept its degree margin nonnegative (>= 7 neighbors) in all scenarios")
print(" * nobody got within 0.3 m of anybody else")
print(" * understating huddles the swarm (smallest mean distance), overstating disperses it")
over_log = results["overstate"][1]
if over_log.min_malicious_h() < 0:
    print(" * under overstating, a malicious robot itself fell below 7 neighbors -- "
          "its own broadcasts hid the deficit from the controller")

roles = results["nominal"][1].roles
print(f"\nmalicious robots this seed: {sorted(roles.malicious)}")
y_final = results["nominal"][1].consensus[-1]
normals = sorted(roles.normal)
print(f"final normal consensus values (nominal): {np.round(y_final[normals], 6)}")
print(f"\nCSV artifacts written to {OUT}/")
