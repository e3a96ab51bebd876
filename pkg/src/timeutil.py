import logging
from datetime import datetime
from typing import Optional

import pytz
from dateutil import parser

# Configure logging
logger = logging.getLogger(__name__)


def utc_now() -> datetime:
    return datetime.now(pytz.UTC)


def parse_datetime(datetime_str: Optional[str]) -> Optional[datetime]:
    """Parse a manifest timestamp; naive values are taken as UTC"""
    if not datetime_str or datetime_str == "null":
        return None
    try:
        text = datetime_str.strip()
        if text.endswith('Z'):
            text = text[:-1] + '+00:00'
        # Timezone without colon
        if text.endswith('+0000'):
            text = text[:-5] + '+00:00'
        try:
            parsed = datetime.fromisoformat(text)
        except ValueError:
            parsed = parser.parse(datetime_str)
        if parsed.tzinfo is None:
            parsed = pytz.UTC.localize(parsed)
        return parsed.astimezone(pytz.UTC)
    except (ValueError, OverflowError) as e:
        logger.error(f"Error parsing datetime string '{datetime_str}': {str(e)}")
        return None


def format_datetime(dt: Optional[datetime]) -> Optional[str]:
    """ISO-8601 in UTC with a trailing Z"""
    if not dt:
        return None
    if dt.tzinfo is None:
        dt = pytz.UTC.localize(dt)
    return dt.astimezone(pytz.UTC).isoformat().replace('+00:00', 'Z')
