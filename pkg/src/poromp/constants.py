"""Physical constants shared across modules."""

#: Gravitational acceleration magnitude [m/s^2].  The drag coupling term and
#: the consolidation coefficient always use this value, regardless of the
#: gravity vector a scenario applies as a body force.
GRAVITY = 9.81

#: Default water density [kg/m^3]; scenarios may override the mixture value.
RHO_WATER = 1000.0
