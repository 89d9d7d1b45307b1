"""Physical constants and unit conversions.

Angles are radians everywhere inside the package. Milliarcseconds (and
mas/yr) only appear at the API and file boundaries, converted with ``MAS``.
"""

import math

#: radians per milliarcsecond
MAS = math.pi / (180.0 * 3600.0 * 1000.0)

#: Julian year in days; proper motions are per Julian year
DAYS_PER_YEAR = 365.25

#: speed of light, km/s
C_KMS = 299792.458

#: astronomical unit, km
AU_KM = 149597870.7

SECONDS_PER_DAY = 86400.0

#: number of fitted astrometric parameters per source
N_SOURCE_PARAMS = 5
