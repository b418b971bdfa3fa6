"""Published Acc/Tok results used as EPR goldens.

Keys are (model, dataset). Tok values are the main token counts; the
parenthesized probe overheads are not part of them.
"""
from __future__ import annotations

ANCHORS = {
    ("DS-1.5B", "AIME24"): {"Vanilla": (29.2, 15591), "NOWAIT": (22.1, 8196)},
    ("DS-1.5B", "AIME25"): {"Vanilla": (25.4, 15099), "NOWAIT": (18.8, 7772)},
    ("DS-1.5B", "Math500"): {"Vanilla": (83.1, 4984), "NOWAIT": (79.0, 3086)},
    ("DS-1.5B", "AMC23"): {"Vanilla": (73.0, 8834), "NOWAIT": (65.3, 4594)},
    ("DS-7B", "AIME24"): {"Vanilla": (55.8, 12775), "NOWAIT": (46.3, 7921)},
    ("DS-7B", "AIME25"): {"Vanilla": (42.3, 14319), "NOWAIT": (30.0, 7449)},
    ("DS-7B", "Math500"): {"Vanilla": (92.1, 4097), "NOWAIT": (88.7, 2768)},
    ("DS-7B", "AMC23"): {"Vanilla": (90.3, 6434), "NOWAIT": (82.2, 3811)},
}

# (model, method, dataset, acc, tok, published EPR)
ROWS = [
    ("DS-1.5B", "TIP", "AIME24", 27.9, 11458, 3.1),
    ("DS-1.5B", "TIP", "AIME25", 22.9, 9160, 2.1),
    ("DS-1.5B", "TIP", "Math500", 80.8, 3419, 1.5),
    ("DS-1.5B", "TIP", "AMC23", 72.0, 5998, 5.1),
    ("DS-1.5B", "DEER", "AIME24", 27.5, 8695, 3.9),
    ("DS-1.5B", "DEER", "AIME25", 21.6, 8807, 1.5),
    ("DS-1.5B", "DEER", "Math500", 70.1, 2575, 0.4),
    ("DS-1.5B", "DEER", "AMC23", 68.2, 5152, 1.4),
    ("DS-1.5B", "Entrocut", "AIME24", 28.8, 8295, 17.5),
    ("DS-1.5B", "Entrocut", "AIME25", 23.8, 7912, 4.0),
    ("DS-1.5B", "Entrocut", "Math500", 81.6, 3341, 2.4),
    ("DS-1.5B", "Entrocut", "AMC23", 72.8, 6000, 25.7),
    ("DS-7B", "TIP", "AIME24", 51.3, 9919, 1.2),
    ("DS-7B", "TIP", "AIME25", 32.9, 10138, 0.8),
    ("DS-7B", "TIP", "Math500", 90.5, 3055, 1.7),
    ("DS-7B", "TIP", "AMC23", 87.3, 4714, 1.8),
    ("DS-7B", "DEER", "AIME24", 49.2, 9138, 1.1),
    ("DS-7B", "DEER", "AIME25", 37.7, 9586, 1.8),
    ("DS-7B", "DEER", "Math500", 89.0, 2342, 1.5),
    ("DS-7B", "DEER", "AMC23", 86.9, 4322, 1.9),
    ("DS-7B", "Entrocut", "AIME24", 51.7, 9663, 1.5),
    ("DS-7B", "Entrocut", "AIME25", 38.1, 9555, 2.0),
    ("DS-7B", "Entrocut", "Math500", 91.1, 3046, 2.7),
    ("DS-7B", "Entrocut", "AMC23", 89.2, 5216, 3.4),
]

# published average EPR per (model, method)
AVG_EPR = {
    ("DS-1.5B", "TIP"): 2.9,
    ("DS-1.5B", "DEER"): 1.7,
    ("DS-1.5B", "Entrocut"): 12.4,
    ("DS-7B", "TIP"): 1.3,
    ("DS-7B", "DEER"): 1.5,
    ("DS-7B", "Entrocut"): 2.4,
}

# AIME25 ablation rows, published to two decimals: (model, variant, acc, tok, EPR)
ABLATION_ROWS = [
    ("DS-1.5B", "EntroCut", 23.8, 7912.8, 4.05),
    ("DS-1.5B", "w/ hard budget", 22.0, 7590.8, 1.99),
    ("DS-1.5B", "w/o entropy probe", 21.9, 8547.1, 1.69),
    ("DS-7B", "EntroCut", 38.1, 9555.3, 2.04),
    ("DS-7B", "w/ hard budget", 17.2, 6815.8, 0.54),
    ("DS-7B", "w/o entropy probe", 37.0, 9536.6, 1.62),
]
