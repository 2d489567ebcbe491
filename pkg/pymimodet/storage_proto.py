from typing import Protocol, runtime_checkable

@runtime_checkable
class StorageProto(Protocol):
    async def set_key(self, key, val):
        """Store a parameter blob under key."""

    async def get_key(self, key):
        """Get the parameter blob stored under key, None if missing."""

    async def list_keys(self):
        """Display all cached parameter sets."""

    async def close(self):
        """Release the backing store."""
