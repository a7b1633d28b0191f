from multiprocessing import Pool


def ordered_map(func, items, workers=1):
    """Maps func over items, using a multiprocessing pool when workers > 1. Results are returned in input order
    regardless of worker count, so any reduction over them has a fixed order."""
    items = list(items)
    if workers is None or workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with Pool(min(workers, len(items))) as p:
        return p.map(func, items)
