"""Brute-force mAP written directly from the metric definitions.

Plain lists and loops only; shares no code with featlock.evalkit.  Boxes are
(x_min, y_min, x_max, y_max) tuples, detections (class, conf, box), ground
truths (class, box).
"""


def box_iou(a, b):
    ix0, iy0 = max(a[0], b[0]), max(a[1], b[1])
    ix1, iy1 = min(a[2], b[2]), min(a[3], b[3])
    if ix1 <= ix0 or iy1 <= iy0:
        return 0.0
    inter = (ix1 - ix0) * (iy1 - iy0)
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def _pr_points(images_dets, images_gts, cls, thresh):
    """Cumulative (recall, precision) for one class over the whole set."""
    n_gt = sum(1 for gts in images_gts for g in gts if g[0] == cls)
    ranked = []
    order = 0
    for img, dets in enumerate(images_dets):
        for d in dets:
            if d[0] == cls:
                ranked.append((d[1], order, img, d[2]))
            order += 1
    ranked.sort(key=lambda r: (-r[0], r[1]))
    used = set()
    tp = fp = 0
    points = []
    for _conf, _order, img, box in ranked:
        best, best_iou = None, None
        for j, g in enumerate(images_gts[img]):
            if g[0] != cls or (img, j) in used:
                continue
            o = box_iou(box, g[1])
            if o >= thresh and (best_iou is None or o > best_iou):
                best, best_iou = j, o
        if best is None:
            fp += 1
        else:
            used.add((img, best))
            tp += 1
        points.append((tp / n_gt, tp / (tp + fp)))
    return n_gt, points


def ap_11point(points):
    total = 0.0
    for k in range(11):
        r = k / 10
        best = 0.0
        for rec, prec in points:
            if rec >= r and prec > best:
                best = prec
        total += best
    return total / 11


def ap_101point(points):
    total = 0.0
    for k in range(101):
        r = k / 100
        best = 0.0
        for rec, prec in points:
            if rec >= r and prec > best:
                best = prec
        total += best
    return total / 101


def oracle_map(images_dets, images_gts, thresholds=(0.5,), ap_rule=ap_11point):
    classes = sorted({g[0] for gts in images_gts for g in gts})
    per_class = {}
    for c in classes:
        s = 0.0
        for t in thresholds:
            _, pts = _pr_points(images_dets, images_gts, c, t)
            s += ap_rule(pts)
        per_class[c] = s / len(thresholds)
    return sum(per_class.values()) / len(per_class), per_class
