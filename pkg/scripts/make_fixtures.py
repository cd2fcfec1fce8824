"""
Regenerate the golden files under tests/fixtures/.
Run after an intentional change to the PR-curve export format.
"""
import os
import sys
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from pathlib import Path
from typing import List, Tuple

from data.models import Detection, GtBox
from evaluation.metrics import evaluate_detections, export_pr_curve

FIXTURES = Path(__file__).resolve().parent.parent / "tests" / "fixtures"


def golden_case() -> Tuple[List[List[Detection]], List[List[GtBox]]]:
    """
    One image: class 0 has two boxes and three detections (0.9 hit, 0.8 miss,
    0.7 hit); class 1 has one box found at 0.6.
    """
    gts = [[
        GtBox(cx=20, cy=20, w=10, h=10, class_id=0),
        GtBox(cx=60, cy=60, w=10, h=10, class_id=0),
        GtBox(cx=100, cy=40, w=20, h=10, class_id=1),
    ]]
    dets = [[
        Detection(cx=20, cy=20, w=10, h=10, class_id=0, score=0.9),
        Detection(cx=150, cy=150, w=10, h=10, class_id=0, score=0.8),
        Detection(cx=60, cy=61, w=10, h=10, class_id=0, score=0.7),
        Detection(cx=100, cy=40, w=20, h=10, class_id=1, score=0.6),
    ]]
    return dets, gts


def main():
    FIXTURES.mkdir(parents=True, exist_ok=True)
    dets, gts = golden_case()
    report = evaluate_detections(dets, gts, num_classes=4)
    export_pr_curve(report, FIXTURES / "pr_golden.csv")
    print(f"Wrote {FIXTURES / 'pr_golden.csv'}")
    print(f"map50={report.map50:.6f} map5095={report.map5095:.6f}")


if __name__ == "__main__":
    main()
