# Package marker for the WEnets pipeline modules.
