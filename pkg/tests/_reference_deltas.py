"""Published relative changes (percent) used as formatter input."""

REFERENCE_DELTAS = [
    ("HBC", "Music", 0.47, 0.22, -2.34),
    ("HBC", "Movies", -2.83, -2.78, -0.57),
    ("HBC", "Sports", 0.70, 0.71, -1.12),
    ("NLR", "Music", -2.94, -3.32, -4.10),
    ("NLR", "Movies", -8.32, -8.51, -3.99),
    ("NLR", "Sports", -2.63, -2.67, -3.22),
]

EXPECTED_TEXT = """\
Model    Domain            EER        TER        UER
----------------------------------------------------
HBC      Music          +0.47%     +0.22%     -2.34%
         Movies         -2.83%     -2.78%     -0.57%
         Sports         +0.70%     +0.71%     -1.12%
NLR      Music         -2.94%*    -3.32%*    -4.10%*
         Movies        -8.32%*    -8.51%*    -3.99%*
         Sports        -2.63%*    -2.67%*    -3.22%*"""
