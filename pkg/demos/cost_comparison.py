"""Compare FLOPs and parameters of grouping variants against each baseline network.

Run: python demos/cost_comparison.py
"""
from rootconv import compare, make_arch, net_cost

VARIANTS = {
    "nin": ["root-2", "root-4", "root-8", "tree-4", "column-4"],
    "resnet50": ["root-4", "root-16", "root-64"],
    "googlenet": ["root-2", "root-4", "root-8", "root-16"],
}


def main():
    for arch, variants in VARIANTS.items():
        base = net_cost(make_arch(arch))
        print(f"{arch}: baseline {base.total_flops / 1e6:,.1f}M multiply-adds, {base.total_params / 1e6:,.2f}M params")
        for v in variants:
            rep = compare(base, net_cost(make_arch(arch, v)))
            print(f"  {v:<10} flops {(rep.flops_ratio - 1) * 100:+6.1f}%   params {(rep.params_ratio - 1) * 100:+6.1f}%")
        print()


if __name__ == "__main__":
    main()
