"""Fixed, versioned English stop-word list used across the label pipeline."""

STOPWORD_LIST_VERSION = 1

STOPWORDS = frozenset(
    """
    a about above after again against all am an and any are aren arent as at
    be because been before being below between both but by
    can cannot cant could couldnt
    did didnt do does doesnt doing dont down during
    each few for from further
    had hadnt has hasnt have havent having he hed hell her here hers herself
    hes him himself his how hows
    i id if ill im in into is isnt it its itself ive
    just
    lets
    me more most mustnt my myself
    no nor not
    of off on once only or other ought our ours ourselves out over own
    same shant she shed shell shes should shouldnt so some such
    than that thats the their theirs them themselves then there theres these
    they theyd theyll theyre theyve this those through to too
    under until up upon us
    very
    was wasnt we wed well were weren werent weve what whats when whens where
    wheres which while who whom whos why whys will with wont would wouldnt
    you youd youll your youre yours yourself yourselves youve
    """.split()
)
