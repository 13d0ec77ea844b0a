"""Brute-force reference implementations shared by the test modules."""

import math


def edge_rows_oracle(pixels, threshold, min_pixels):
    """Enumerate every (row, column, channel) triple."""
    px = pixels.astype(int)
    if px.ndim == 2:
        px = px[:, :, None]
    h, w, c = px.shape
    rows = []
    for i in range(h - 1):
        hits = 0
        for j in range(w):
            if any(abs(px[i, j, ch] - px[i + 1, j, ch]) > threshold for ch in range(c)):
                hits += 1
        if hits >= min_pixels:
            rows.append(i)
    return rows


def predict_oracle(query_name, dataset, config):
    """Plain-loop filter with widening, then full sort."""
    query = next(r for r in dataset if r.name == query_name)
    half = [float(h) for h in config.intervals]
    while True:
        cands = []
        for r in dataset:
            if r.name == query_name:
                continue
            ok = True
            for slot, a in enumerate(config.priority):
                if not (query.attributes[a] - half[slot] <= r.attributes[a] <= query.attributes[a] + half[slot]):
                    ok = False
                    break
            if ok:
                cands.append(r)
        if len(cands) >= config.candidate_floor or all(h >= 100 for h in half):
            break
        half = [min(h * config.widen_factor, 100.0) for h in half]
    scored = []
    for r in cands:
        terms = []
        for slot, a in enumerate(config.priority):
            d = float(query.attributes[a]) - float(r.attributes[a])
            terms.append(config.weights[slot] * (d * d))
        scored.append((math.sqrt(math.fsum(terms)), r.name))
    scored.sort()
    return [(n, d) for d, n in scored[:config.top_n]]
