"""Block device, journal and live-upgrade services beneath the file systems."""
