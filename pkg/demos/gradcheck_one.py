"""Finite-difference check of the full loss gradient on one small random scene."""

import sys

from tetsdf.gradcheck import check_case, format_report

case = check_case(int(sys.argv[1]) if len(sys.argv) > 1 else 1)
print(format_report([case]))
