"""Writers for the JSON, CSV and plain-text artifacts the commands emit."""
import json
import os
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd

from disenhcn.data import Record
from disenhcn.schemas import MetricsReport

RANK_COLUMNS = ["u", "l", "t", "a", "rank"]


def to_json(payload, pretty: bool = False) -> str:
    if pretty:
        return json.dumps(payload, indent=2, sort_keys=True)
    return json.dumps(payload, separators=(",", ":"))


def write_json(payload, path: str, pretty: bool = True) -> None:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(to_json(payload, pretty=pretty))
        handle.write("\n")


def metrics_json(report: MetricsReport) -> str:
    return to_json(report.to_json_dict())


def write_ranks_csv(records: Sequence[Record], ranks: Sequence[int], path: str) -> None:
    _ensure_parent(path)
    frame = pd.DataFrame(list(records), columns=RANK_COLUMNS[:4])
    frame["rank"] = np.asarray(ranks, dtype=np.int64)
    frame.to_csv(path, index=False, lineterminator="\n")


def write_attention_csv(frame: pd.DataFrame, path: str) -> None:
    _ensure_parent(path)
    frame.to_csv(path, index=False, lineterminator="\n", float_format="%.6f")


def summary_table(summary: Dict[str, float]) -> str:
    """One-row table in the column order of ``summary``."""
    frame = pd.DataFrame([summary])
    if "Density" in frame:
        frame["Density"] = frame["Density"].map(lambda x: f"{x:.2e}")
    return frame.to_string(index=False)


def sparsity_table(results: List[Tuple[str, MetricsReport]]) -> str:
    rows = [
        {"group": label, "n_records": r.n_records, f"recall@{r.k}": round(r.recall_at_k, 4),
         f"ndcg@{r.k}": round(r.ndcg_at_k, 4)}
        for label, r in results
    ]
    return pd.DataFrame(rows).to_string(index=False)


def topk_lines(activity_ids: Sequence[str], scores: Sequence[float]) -> List[str]:
    return [f"{i + 1}\t{a}\t{s:.6f}" for i, (a, s) in enumerate(zip(activity_ids, scores))]


def _ensure_parent(path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
