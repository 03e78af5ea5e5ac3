"""Built-in concept bank and filler vocabulary for desk-scale runs.

The deterministic LLM stub and the synthetic subject share this bank so the
closed loop can recover planted selectivity without any network access. All
keywords are single lowercase tokens and the concepts are pairwise disjoint.
"""

from __future__ import annotations

ConceptBank = dict[str, tuple[str, ...]]


def default_concept_bank() -> ConceptBank:
    return {
        "food preparation": (
            "cinnamon", "dough", "oven", "simmer", "flour", "recipe", "baking", "skillet",
        ),
        "locations": (
            "paris", "village", "harbor", "downtown", "island", "city", "border", "avenue",
        ),
        "directions": (
            "north", "south", "left", "right", "uphill", "straight", "east", "west",
        ),
        "emotional expression": (
            "tears", "laughter", "grief", "joy", "anger", "relief", "sobbing", "delight",
        ),
        "body parts": (
            "elbow", "knee", "shoulder", "ankle", "wrist", "spine", "thumb", "forehead",
        ),
        "numbers and measurements": (
            "fifty", "dozen", "meters", "gallons", "inches", "percent", "thousand", "ounces",
        ),
        "time and dates": (
            "tuesday", "midnight", "january", "afternoon", "decade", "evening", "noon", "weekend",
        ),
        "dialogue and speech": (
            "said", "told", "whispered", "shouted", "replied", "asked", "muttered", "announced",
        ),
        "weather": (
            "rain", "thunder", "fog", "snow", "breeze", "storm", "drizzle", "sunshine",
        ),
        "animals": (
            "dog", "cat", "horse", "sparrow", "rabbit", "wolf", "goat", "salmon",
        ),
        "vehicles and travel": (
            "train", "bicycle", "airplane", "ferry", "truck", "subway", "voyage", "highway",
        ),
        "family relationships": (
            "mother", "father", "cousin", "grandmother", "uncle", "sister", "nephew", "aunt",
        ),
    }


FILLER_WORDS: tuple[str, ...] = (
    "the", "a", "an", "and", "but", "so", "then", "while", "of", "in", "on", "at",
    "with", "from", "were", "was", "had", "has", "have", "he", "she", "they", "we",
    "you", "it", "this", "that", "there", "here", "went", "came", "looked", "turned",
    "seemed", "quietly", "slowly", "gently", "very", "quite", "rather", "almost",
    "soon", "later", "before", "around", "through", "against", "about", "under",
    "over", "between", "light", "sound", "small", "large", "old", "new", "long",
    "short", "warm", "cold", "open", "closed", "began", "kept", "found", "made",
    "took", "gave", "held", "saw", "heard", "knew", "thought", "felt", "wanted",
    "tried", "started", "stopped", "walked", "stood", "sat", "waited", "stayed",
    "moved", "way", "thing", "place", "part", "hand", "eyes", "face", "room",
    "door", "window", "floor", "wall", "chair", "book", "paper", "letter",
    "voice", "step", "road", "path", "field", "tree", "stone", "air", "ground",
)
