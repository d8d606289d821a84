"""Print aggregator parameter counts for the reference model grids under both conventions."""
from treetensor.aggregators import ALL, TABLE, AggregatorKind, param_count

GRIDS = {
    "logical relations (L=2)": [("full", c, None) for c in (3, 5, 10, 20, 50, 100)]
    + [("sum", c, None) for c in (3, 5, 10, 20, 50, 100)]
    + [("hosvd", c, r) for c, rs in ((10, (3, 5, 7)), (20, (5, 10, 15)), (50, (10, 20, 30)), (100, (20, 50, 70))) for r in rs],
    "ListOps (L=5)": [("full", c, None) for c in (3, 5, 7)]
    + [("sum", c, None) for c in (25, 88, 214)]
    + [("hosvd", c, r) for c in (10, 20, 50) for r in (3, 5, 7)],
}

if __name__ == "__main__":
    for title, grid in GRIDS.items():
        L = 2 if "L=2" in title else 5
        print(f"# {title}")
        print(f"{'model':8} {'c':>4} {'r':>3} {'table':>9} {'all':>9}")
        for tag, c, r in grid:
            kind = AggregatorKind(tag, c, L, 0, r)
            print(f"{tag:8} {c:4d} {r or '-':>3} {param_count(kind, TABLE):9d} {param_count(kind, ALL):9d}")
        print()
