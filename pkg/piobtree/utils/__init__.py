from .report_utils import drop_wall_clock, read_report, write_report, write_text_report
