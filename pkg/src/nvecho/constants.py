"""Physical constants and default device and sample parameters (SI, angular units)."""

import math

TWO_PI = 2.0 * math.pi

HBAR = 1.054571817e-34  # J s
MU0_OVER_4PI = 1e-7  # T m / A

GAMMA_E = TWO_PI * 28.024951e9  # rad / (s T)
GAMMA_C13 = TWO_PI * 10.705e6  # rad / (s T)

# diamond: cubic cell a = 3.567 A, 8 atoms per cell
DIAMOND_A = 3.567e-10
CARBON_DENSITY = 8.0 / DIAMOND_A**3
CC_BOND = math.sqrt(3.0) / 4.0 * DIAMOND_A

# secular dipolar prefactor mu0 hbar gamma_1 gamma_2 / 4 pi, rad/s * m^3
DIP_EE = MU0_OVER_4PI * HBAR * GAMMA_E * GAMMA_E
DIP_EC = MU0_OVER_4PI * HBAR * GAMMA_E * GAMMA_C13
DIP_CC = MU0_OVER_4PI * HBAR * GAMMA_C13 * GAMMA_C13

# device and sample defaults
OMEGA_R = TWO_PI * 2.915e9
Q_LOADED = 650.0
D_ZFS = TWO_PI * 2.88e9
A_HF = TWO_PI * 2.2e6
LINE_HWHM = TWO_PI * 65e3
G_ENS = TWO_PI * 410e3
N_SPINS = 1e10
NV_AXIS_ANGLE = math.acos(2.0 / math.sqrt(6.0))
B_ECHO = 1.74e-3
B_SCAN = 1.8e-3
P_MAX = 0.90
