"""Strong deep feedback control: simulation, learning rules and theory checks."""
