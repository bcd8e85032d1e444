use wildmatch::WildMatch;

/// Shell-style wildcard match (`*` and `?`) over owner, pipe and stream names.
pub(crate) fn matches(pattern: &str, text: &str) -> bool {
    WildMatch::new(pattern).matches(text)
}
