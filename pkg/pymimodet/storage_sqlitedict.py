import logging
import os

from sqlitedict import SqliteDict

from .models import params_from_bytes

_LOGGER = logging.getLogger(__name__)


class StorageSqliteDict:
    """Trained-parameter cache: MPARM1 blobs keyed by "<kind>:<channel-hash>:<config-hash>"."""

    def __init__(self, db_path=None, table="params"):
        CACHE_FILE_NAME = ".pymimodet.sqlite"
        USER_HOME = "HOME"

        self.db = None
        self.table = table

        if db_path:
            self.db_path = db_path
        elif os.getenv(USER_HOME) is not None and os.access(os.getenv(USER_HOME), os.W_OK):
            self.db_path = os.path.join(os.getenv(USER_HOME), CACHE_FILE_NAME)
        else:
            self.db_path = os.path.join(os.getcwd(), CACHE_FILE_NAME)

    @classmethod
    async def create(cls, *args, **kwargs):
        storage = cls(*args, **kwargs)
        await storage.async_init()
        return storage

    async def async_init(self):
        """Open db."""
        self.db = SqliteDict(self.db_path, self.table)
        _LOGGER.debug("opened parameter cache %s table %s", self.db_path, self.table)

    async def close(self):
        if self.db is not None:
            self.db.close()
            self.db = None

    async def set_key(self, key, val):
        """Store a parameter blob under key."""
        if key is None or val is None:
            return

        self.db[key] = bytes(val)
        self.db.commit()

    async def get_key(self, key):
        """Get the parameter blob stored under key, None if missing."""
        if key is None:
            return

        return self.db.get(key)

    async def list_keys(self):
        """Display all cached parameter sets."""
        for key, value in self.db.iteritems():
            params = params_from_bytes(value)
            print(key, params.kind, f"T={params.n_layers}", f"{len(value)} bytes")
