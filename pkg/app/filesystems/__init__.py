"""File-system variants served through the File Operations API."""

from typing import Optional

from app.filesystems.bento_fs import BentoFs
from app.filesystems.bento_prov import BentoProv
from app.filesystems.layout import Clock
from app.services.blockdev import BlockDevice

VARIANTS: dict[str, type[BentoFs]] = {
    BentoFs.variant: BentoFs,
    BentoProv.variant: BentoProv,
}


def make_instance(variant: str, device: Optional[BlockDevice] = None, clock: Optional[Clock] = None) -> BentoFs:
    """
    Unmounted instance of a named variant.

    Raises:
        KeyError: If the variant is unknown
    """
    try:
        cls = VARIANTS[variant]
    except KeyError:
        raise KeyError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}") from None
    return cls(device=device, clock=clock)
